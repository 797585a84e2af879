//! Greedy sequential ablation: axes, experiment records, resumable study loop.

pub mod config;
pub mod data;
pub mod report;
pub mod synth;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{Modality, ModalitySet, RanoLabel};
use crate::error::{Error, IoContext, Result};
use crate::eval::stats::{dunn_posthoc, kruskal_wallis, mann_whitney_u, StatResult};
use crate::eval::{confusion, ConfusionMatrix, Metric, Metrics, MetricsReport};
use crate::explain;
use crate::models::checkpoint::{load_checkpoint, save_checkpoint};
use crate::models::{build_model_with, fuse_clinical, ArchitectureId, InputSpec, ModelOptions};
use crate::seeds::derive_seed;
use crate::train::{predict_classes, pretrain, train_fold, EpochRecord, PretrainTask, StopReason};
use crate::volume::VolumeGrid;

pub use config::StudyConfig;
pub use data::StudyData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AxisName {
    Subtraction,
    Modalities,
    Architecture,
    Pretraining,
    ClinicalData,
}

impl AxisName {
    pub const ORDER: [AxisName; 5] = [
        AxisName::Subtraction,
        AxisName::Modalities,
        AxisName::Architecture,
        AxisName::Pretraining,
        AxisName::ClinicalData,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AxisName::Subtraction => "subtraction",
            AxisName::Modalities => "modalities",
            AxisName::Architecture => "architecture",
            AxisName::Pretraining => "pretraining",
            AxisName::ClinicalData => "clinical",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            AxisName::Subtraction => "Subtraction",
            AxisName::Modalities => "Modalities",
            AxisName::Architecture => "Architecture",
            AxisName::Pretraining => "Pretraining",
            AxisName::ClinicalData => "Clinical data",
        }
    }
}

impl fmt::Display for AxisName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AxisName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AxisName::ORDER
            .into_iter()
            .find(|a| a.key().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown axis `{s}`")))
    }
}

/// One full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choices {
    pub subtraction: bool,
    pub modalities: ModalitySet,
    pub architecture: ArchitectureId,
    pub pretraining: PretrainTask,
    pub clinical: bool,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Choices {
    pub fn spec(&self, grid: [usize; 3]) -> InputSpec {
        InputSpec::new(self.modalities.clone(), self.subtraction, false, grid)
    }

    pub fn channels(&self) -> usize {
        self.modalities.len() * if self.subtraction { 1 } else { 2 }
    }

    /// Readable, file-name safe and unique per configuration.
    pub fn key(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("choices serialize"));
        format!(
            "{}_{}_{}_{}_{}_{}",
            if self.subtraction { "sub" } else { "nosub" },
            self.modalities.key(),
            self.architecture.name(),
            self.pretraining.name(),
            if self.clinical { "clin" } else { "noclin" },
            &hex(&digest)[..8]
        )
    }

    pub fn option_id(&self, axis: AxisName) -> String {
        match axis {
            AxisName::Subtraction => AxisOption::Subtraction(self.subtraction).id(),
            AxisName::Modalities => AxisOption::Modalities(self.modalities.clone()).id(),
            AxisName::Architecture => AxisOption::Architecture(self.architecture).id(),
            AxisName::Pretraining => AxisOption::Pretraining(self.pretraining.clone()).id(),
            AxisName::ClinicalData => AxisOption::Clinical(self.clinical).id(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AxisOption {
    Subtraction(bool),
    Modalities(ModalitySet),
    Architecture(ArchitectureId),
    Pretraining(PretrainTask),
    Clinical(bool),
}

impl AxisOption {
    pub fn id(&self) -> String {
        match self {
            AxisOption::Subtraction(true) => "subtraction".into(),
            AxisOption::Subtraction(false) => "no-subtraction".into(),
            AxisOption::Modalities(m) => m.key(),
            AxisOption::Architecture(a) => a.name().into(),
            AxisOption::Pretraining(p) => p.name().into(),
            AxisOption::Clinical(true) => "clinical".into(),
            AxisOption::Clinical(false) => "no-clinical".into(),
        }
    }

    pub fn apply(&self, c: &Choices) -> Choices {
        let mut c = c.clone();
        match self {
            AxisOption::Subtraction(v) => c.subtraction = *v,
            AxisOption::Modalities(m) => c.modalities = m.clone(),
            AxisOption::Architecture(a) => c.architecture = *a,
            AxisOption::Pretraining(p) => c.pretraining = p.clone(),
            AxisOption::Clinical(v) => c.clinical = *v,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachAxis {
    pub name: AxisName,
    pub options: Vec<AxisOption>,
}

impl ApproachAxis {
    pub fn option(&self, id: &str) -> Option<&AxisOption> {
        self.options.iter().find(|o| o.id() == id)
    }
}

/// Axes in study order.
pub fn axes_from_config(a: &config::AxesConfig) -> Result<Vec<ApproachAxis>> {
    let axes = vec![
        ApproachAxis {
            name: AxisName::Subtraction,
            options: a
                .subtraction
                .iter()
                .map(|&v| AxisOption::Subtraction(v))
                .collect(),
        },
        ApproachAxis {
            name: AxisName::Modalities,
            options: a
                .modalities
                .iter()
                .map(|m| m.parse().map(AxisOption::Modalities))
                .collect::<Result<_>>()?,
        },
        ApproachAxis {
            name: AxisName::Architecture,
            options: a
                .architecture
                .iter()
                .map(|m| m.parse().map(AxisOption::Architecture))
                .collect::<Result<_>>()?,
        },
        ApproachAxis {
            name: AxisName::Pretraining,
            options: a
                .pretraining
                .iter()
                .cloned()
                .map(AxisOption::Pretraining)
                .collect(),
        },
        ApproachAxis {
            name: AxisName::ClinicalData,
            options: a
                .clinical
                .iter()
                .map(|&v| AxisOption::Clinical(v))
                .collect(),
        },
    ];
    for ax in &axes {
        let mut ids: Vec<String> = ax.options.iter().map(AxisOption::id).collect();
        if ids.is_empty() {
            return Err(Error::Config(format!("axis {} has no options", ax.name)));
        }
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "axis {} lists an option twice",
                ax.name
            )));
        }
    }
    Ok(axes)
}

/// First option of every axis.
pub fn baseline(axes: &[ApproachAxis]) -> Choices {
    let mut c = Choices {
        subtraction: false,
        modalities: ModalitySet::all(),
        architecture: ArchitectureId::Densenet121,
        pretraining: PretrainTask::None,
        clinical: false,
    };
    for ax in axes {
        if let Some(o) = ax.options.first() {
            c = o.apply(&c);
        }
    }
    c
}

/// One trained (axis, option, fold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub axis: AxisName,
    pub option: String,
    pub fold: usize,
    pub choices: Choices,
    pub channels: usize,
    pub metrics: Option<Metrics>,
    pub confusion: Option<ConfusionMatrix>,
    pub config_hash: String,
    /// Relative to the study output directory.
    pub checkpoint: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stop_reason: Option<StopReason>,
    pub wall_ms: u64,
    pub error: Option<String>,
}

impl ExperimentRecord {
    pub fn is_complete(&self) -> bool {
        self.error.is_none() && self.metrics.is_some()
    }

    /// Record with the run-dependent wall time removed.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

/// What executing one fold produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub config_hash: String,
    pub checkpoint: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

/// Append-only JSON-lines store of experiment records.
#[derive(Debug)]
pub struct RecordStore {
    pub path: PathBuf,
    pub records: Vec<ExperimentRecord>,
}

impl RecordStore {
    /// Load existing records. A torn final line from an interrupted write is dropped.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(path).at(path)?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            let mut torn = false;
            for (i, line) in lines.iter().enumerate() {
                match serde_json::from_str::<ExperimentRecord>(line) {
                    Ok(r) => records.push(r),
                    Err(e) if i + 1 == lines.len() => {
                        log::warn!("{}: dropping torn last record ({e})", path.display());
                        torn = true;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if torn || (!text.is_empty() && !text.ends_with('\n')) {
                let mut clean = String::new();
                for r in &records {
                    clean.push_str(&serde_json::to_string(r)?);
                    clean.push('\n');
                }
                fs::write(path, clean).at(path)?;
            }
        } else if let Some(d) = path.parent() {
            fs::create_dir_all(d).at(d)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            records,
        })
    }

    fn detached() -> Self {
        Self {
            path: PathBuf::new(),
            records: Vec::new(),
        }
    }

    pub fn get(&self, axis: AxisName, option: &str, fold: usize) -> Option<&ExperimentRecord> {
        self.records
            .iter()
            .find(|r| r.axis == axis && r.option == option && r.fold == fold)
    }

    /// A completed record of the same configuration and fold on any axis.
    pub fn same_run(&self, choices: &Choices, fold: usize) -> Option<&ExperimentRecord> {
        self.records
            .iter()
            .find(|r| r.fold == fold && &r.choices == choices && r.is_complete())
    }

    pub fn append(&mut self, r: ExperimentRecord) -> Result<()> {
        if self.get(r.axis, &r.option, r.fold).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate record {}/{}/fold{}",
                r.axis, r.option, r.fold
            )));
        }
        let mut line = serde_json::to_string(&r)?;
        line.push('\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .at(&self.path)?;
        f.write_all(line.as_bytes()).at(&self.path)?;
        f.sync_data().at(&self.path)?;
        self.records.push(r);
        Ok(())
    }

    pub fn for_axis(&self, axis: AxisName) -> Vec<&ExperimentRecord> {
        self.records.iter().filter(|r| r.axis == axis).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionSummary {
    pub option: String,
    pub channels: usize,
    pub complete: bool,
    pub report: Option<MetricsReport>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTests {
    pub metric: Metric,
    pub results: Vec<StatResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisOutcome {
    pub axis: AxisName,
    /// Choices in force when the axis ran (its own slot holds the baseline).
    pub frozen: Choices,
    pub options: Vec<OptionSummary>,
    pub winner: Option<String>,
    pub tests: Vec<MetricTests>,
    pub notes: Vec<String>,
}

/// Highest median balanced accuracy, then median F1, then fewer channels;
/// remaining ties keep the earlier option.
pub fn select_winner(options: &[OptionSummary]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, o) in options.iter().enumerate() {
        let Some(r) = o.report.as_ref().filter(|_| o.complete) else {
            continue;
        };
        let better = match best {
            None => true,
            Some(b) => {
                let (rb, cb) = (options[b].report.as_ref().unwrap(), options[b].channels);
                (r.balanced_accuracy, r.f1, std::cmp::Reverse(o.channels)).partial_cmp(&(
                    rb.balanced_accuracy,
                    rb.f1,
                    std::cmp::Reverse(cb),
                )) == Some(std::cmp::Ordering::Greater)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Rank tests over the fold values of every complete option, per metric.
pub fn axis_tests(options: &[OptionSummary]) -> Result<Vec<MetricTests>> {
    let done: Vec<&OptionSummary> = options
        .iter()
        .filter(|o| o.complete && o.report.is_some())
        .collect();
    if done.len() < 2 {
        return Ok(Vec::new());
    }
    let names: Vec<&str> = done.iter().map(|o| o.option.as_str()).collect();
    let mut out = Vec::new();
    for m in Metric::ALL {
        let groups: Vec<Vec<f64>> = done
            .iter()
            .map(|o| o.report.as_ref().unwrap().values(m))
            .collect();
        let results = if groups.len() == 2 {
            vec![mann_whitney_u(&groups[0], &groups[1])?.labelled(&names)]
        } else {
            let mut v = vec![kruskal_wallis(&groups)?.labelled(&names)];
            let mut pairs = Vec::new();
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    pairs.push([names[i], names[j]]);
                }
            }
            for (r, pair) in dunn_posthoc(&groups)?.into_iter().zip(pairs) {
                v.push(r.labelled(&pair));
            }
            v
        };
        out.push(MetricTests { metric: m, results });
    }
    Ok(out)
}

/// Aggregate the records of one axis into option summaries, tests and a winner.
pub fn summarize_axis(
    axis: &ApproachAxis,
    frozen: &Choices,
    records: &[&ExperimentRecord],
    folds: &[usize],
) -> Result<AxisOutcome> {
    let mut options = Vec::new();
    let mut notes = Vec::new();
    for opt in &axis.options {
        let id = opt.id();
        let choices = opt.apply(frozen);
        let mine: Vec<&&ExperimentRecord> = records.iter().filter(|r| r.option == id).collect();
        let failed: Vec<String> = mine
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("fold {}: {e}", r.fold)))
            .collect();
        let mut per_fold = Vec::new();
        for &f in folds {
            if let Some(m) = mine
                .iter()
                .find(|r| r.fold == f)
                .and_then(|r| r.metrics.filter(|_| r.error.is_none()))
            {
                per_fold.push(m);
            }
        }
        let complete = failed.is_empty() && per_fold.len() == folds.len();
        let note = if !failed.is_empty() {
            Some(format!(
                "incomplete, excluded from selection: {}",
                failed.join("; ")
            ))
        } else if per_fold.len() < folds.len() {
            Some(format!(
                "{} of {} folds recorded",
                per_fold.len(),
                folds.len()
            ))
        } else {
            None
        };
        if let Some(n) = &note {
            notes.push(format!("{id}: {n}"));
        }
        options.push(OptionSummary {
            option: id,
            channels: choices.channels(),
            complete,
            report: (!per_fold.is_empty()).then(|| MetricsReport::from_folds(per_fold)),
            note,
        });
    }
    let winner = select_winner(&options).map(|i| options[i].option.clone());
    if options.len() == 1 && winner.is_some() {
        notes.push("single option, selected without a test".into());
    }
    let tests = axis_tests(&options)?;
    Ok(AxisOutcome {
        axis: axis.name,
        frozen: frozen.clone(),
        options,
        winner,
        tests,
        notes,
    })
}

/// Stop conditions for partial runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunLimits {
    /// Train only the first `n` folds of every option.
    pub max_folds: Option<usize>,
    /// Abort with [`Error::Interrupted`] after this many newly trained folds.
    pub stop_after: Option<usize>,
}

/// Train every (option, fold) of `axis` not yet in `store`, then summarize.
pub fn run_axis(
    axis: &ApproachAxis,
    frozen: &Choices,
    folds: &[usize],
    store: &mut RecordStore,
    exec: &mut dyn FnMut(&Choices, usize) -> Result<FoldResult>,
    budget: &mut Option<usize>,
) -> Result<AxisOutcome> {
    for opt in &axis.options {
        let id = opt.id();
        let choices = opt.apply(frozen);
        for &fold in folds {
            if store.get(axis.name, &id, fold).is_some() {
                continue;
            }
            if let Some(prev) = store.same_run(&choices, fold).cloned() {
                store.append(ExperimentRecord {
                    axis: axis.name,
                    option: id.clone(),
                    ..prev
                })?;
                continue;
            }
            if *budget == Some(0) {
                return Err(Error::Interrupted(format!(
                    "stopped before {}/{id}/fold{fold}",
                    axis.name
                )));
            }
            let t0 = Instant::now();
            let outcome = exec(&choices, fold);
            let wall_ms = t0.elapsed().as_millis() as u64;
            let rec = match outcome {
                Ok(r) => ExperimentRecord {
                    axis: axis.name,
                    option: id.clone(),
                    fold,
                    choices: choices.clone(),
                    channels: choices.channels(),
                    metrics: Some(r.metrics),
                    confusion: Some(r.confusion),
                    config_hash: r.config_hash,
                    checkpoint: r.checkpoint,
                    n_train: r.n_train,
                    n_test: r.n_test,
                    epochs: r.epochs,
                    best_epoch: r.best_epoch,
                    stop_reason: Some(r.stop_reason),
                    wall_ms,
                    error: None,
                },
                Err(e) => {
                    log::error!("{}/{id}/fold{fold} failed: {e}", axis.name);
                    ExperimentRecord {
                        axis: axis.name,
                        option: id.clone(),
                        fold,
                        choices: choices.clone(),
                        channels: choices.channels(),
                        metrics: None,
                        confusion: None,
                        config_hash: String::new(),
                        checkpoint: None,
                        n_train: 0,
                        n_test: 0,
                        epochs: 0,
                        best_epoch: 0,
                        stop_reason: None,
                        wall_ms,
                        error: Some(e.to_string()),
                    }
                }
            };
            store.append(rec)?;
            if let Some(b) = budget.as_mut() {
                *b -= 1;
            }
        }
    }
    summarize_axis(axis, frozen, &store.for_axis(axis.name), folds)
}

/// The end state of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub axes: Vec<AxisOutcome>,
    /// `(axis, winner)` in study order.
    pub winner_chain: Vec<(AxisName, Option<String>)>,
    pub final_choices: Choices,
    pub explained: Vec<explain::ProbabilityRow>,
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const AXES_FILE: &str = "axes.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// A configured study bound to its output directory.
pub struct Study {
    pub cfg: StudyConfig,
    pub data: StudyData,
    pub axes: Vec<ApproachAxis>,
    pub out: PathBuf,
    pub store: RecordStore,
    pub quiet: bool,
}

impl Study {
    pub fn open(cfg: StudyConfig) -> Result<Self> {
        cfg.validate()?;
        let axes = axes_from_config(&cfg.axes)?;
        let out = cfg.study.output.clone();
        fs::create_dir_all(&out).at(&out)?;
        cfg.write_snapshot(&out, "config.resolved.toml")?;
        let data = StudyData::open(&cfg)?;
        let store = RecordStore::open(&out.join(RECORDS_FILE))?;
        Ok(Self {
            cfg,
            data,
            axes,
            out,
            store,
            quiet: false,
        })
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            vit_patch: self.cfg.study.vit_patch,
        }
    }

    pub fn config_hash(&self, choices: &Choices) -> String {
        let mut h = Sha256::new();
        h.update(self.cfg.train.hash().as_bytes());
        h.update(serde_json::to_vec(choices).expect("choices serialize"));
        h.update(serde_json::to_vec(&self.cfg.data.grid).unwrap());
        hex(&h.finalize())[..16].to_string()
    }

    pub fn checkpoint_rel(&self, choices: &Choices, fold: usize) -> String {
        format!("checkpoints/{}/fold{fold}.ckpt", choices.key())
    }

    /// Train and evaluate one configuration on one fold, saving its checkpoint.
    pub fn train_one(
        &self,
        choices: &Choices,
        fold: usize,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<FoldResult> {
        let samples = self.data.samples(&choices.modalities);
        let plan = self.data.folds(&choices.modalities)?;
        let plan_path = self
            .out
            .join("folds")
            .join(format!("{}.json", choices.modalities.key()));
        if !plan_path.exists() {
            plan.save(&plan_path)?;
        }
        if fold >= plan.n_folds {
            return Err(Error::InvalidArgument(format!(
                "fold {fold} out of range for {} folds",
                plan.n_folds
            )));
        }
        let (tr, te) = plan.split(&samples, fold)?;
        let spec = choices.spec(self.cfg.data.grid);
        let encoder = if choices.clinical {
            Some(self.data.clinical_encoder(&samples, &tr)?)
        } else {
            None
        };
        let train = self.data.dataset(&samples, &tr, &spec, encoder.as_ref())?;
        let test = self.data.dataset(&samples, &te, &spec, encoder.as_ref())?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "fold {fold} of {} has {} training and {} test samples",
                choices.modalities,
                train.len(),
                test.len()
            )));
        }

        let run_seed = derive_seed(
            self.cfg.study.seed,
            &["run", &choices.key(), &fold.to_string()],
        );
        let init_seed = derive_seed(run_seed, &["init"]);
        let net =
            build_model_with::<f32>(choices.architecture, &spec, init_seed, self.model_options())?;
        let net = pretrain(
            &choices.pretraining,
            net,
            &train.inputs,
            derive_seed(run_seed, &["pretrain"]),
        )?;
        let net = fuse_clinical(net, encoder.as_ref().map_or(0, |e| e.dim()));
        let mut tcfg = self.cfg.train.clone();
        tcfg.seed = derive_seed(run_seed, &["train"]);
        let (best, log) = train_fold(net, &train, &test, &tcfg, on_epoch)?;
        let preds = predict_classes(&best, &test, tcfg.batch_size)?;
        let cm = confusion(&preds, &test.labels)?;
        let metrics = Metrics::from_confusion(&cm, self.cfg.study.averaging)?;

        let config_hash = self.config_hash(choices);
        let rel = self.checkpoint_rel(choices, fold);
        let path = self.out.join(&rel);
        if let Some(d) = path.parent() {
            fs::create_dir_all(d).at(d)?;
        }
        save_checkpoint(
            &path,
            &best,
            &config_hash,
            fold,
            serde_json::json!({
                "choices": choices,
                "encoder": encoder,
                "test_ids": test.ids,
            }),
        )?;
        log.write_jsonl(&path.with_extension("trainlog.jsonl"))?;
        Ok(FoldResult {
            metrics,
            confusion: cm,
            config_hash,
            checkpoint: Some(rel),
            n_train: train.len(),
            n_test: test.len(),
            epochs: log.epochs.len(),
            best_epoch: log.best_epoch,
            stop_reason: log.stop_reason,
        })
    }

    fn run_one_axis(
        &self,
        axis: &ApproachAxis,
        frozen: &Choices,
        folds: &[usize],
        store: &mut RecordStore,
        budget: &mut Option<usize>,
    ) -> Result<AxisOutcome> {
        let quiet = self.quiet;
        let mut exec = |c: &Choices, fold: usize| {
            let tag = format!("{}/{}/fold{fold}", axis.name, c.option_id(axis.name));
            if !quiet {
                println!("== {tag}: {}", c.key());
            }
            self.train_one(c, fold, &mut |e| {
                if !quiet {
                    println!(
                        "{tag} epoch {:>3} train {:.4} test {:.4} lr {:.1e}",
                        e.epoch, e.train_loss, e.test_loss, e.lr
                    );
                }
            })
        };
        run_axis(axis, frozen, folds, store, &mut exec, budget)
    }

    fn folds_to_run(&self, limits: &RunLimits) -> Vec<usize> {
        let n = limits
            .max_folds
            .map_or(self.cfg.study.n_folds, |m| m.min(self.cfg.study.n_folds));
        (0..n).collect()
    }

    /// Run (or resume) every axis in order, then explain and report.
    pub fn run(&mut self, limits: RunLimits) -> Result<StudySummary> {
        let folds = self.folds_to_run(&limits);
        let mut frozen = baseline(&self.axes);
        let mut outcomes = Vec::new();
        let mut budget = limits.stop_after;
        let axes = self.axes.clone();
        for axis in &axes {
            let mut store = std::mem::replace(&mut self.store, RecordStore::detached());
            let outcome = self.run_one_axis(axis, &frozen, &folds, &mut store, &mut budget);
            self.store = store;
            let outcome = outcome?;
            if let Some(w) = &outcome.winner {
                frozen = axis.option(w).expect("winner is an option").apply(&frozen);
            }
            outcomes.push(outcome);
            let p = self.out.join(AXES_FILE);
            fs::write(&p, serde_json::to_vec_pretty(&outcomes)?).at(&p)?;
        }
        let explained = self.explain_final(&frozen).unwrap_or_else(|e| {
            log::warn!("explaining the final pipeline failed: {e}");
            Vec::new()
        });
        let summary = StudySummary {
            winner_chain: outcomes
                .iter()
                .map(|o| (o.axis, o.winner.clone()))
                .collect(),
            axes: outcomes,
            final_choices: frozen,
            explained,
        };
        let p = self.out.join(SUMMARY_FILE);
        fs::write(&p, serde_json::to_vec_pretty(&summary)?).at(&p)?;
        report::write_report(
            &self.out,
            &self.store.records,
            &summary.axes,
            Some(&summary),
        )?;
        Ok(summary)
    }

    /// Attribution maps for the first test samples of fold 0 of `choices`.
    pub fn explain_final(&self, choices: &Choices) -> Result<Vec<explain::ProbabilityRow>> {
        let n = self.cfg.study.explain_samples;
        if n == 0 {
            return Ok(Vec::new());
        }
        let rel = self.checkpoint_rel(choices, 0);
        let ckpt = self.out.join(&rel);
        if !ckpt.exists() {
            return Err(Error::Checkpoint {
                path: ckpt,
                msg: "final pipeline has no fold-0 checkpoint".into(),
            });
        }
        explain_checkpoint(&self.data, &ckpt, &self.out.join("explain"), n, None)
    }
}

/// Re-score a saved checkpoint on the test samples recorded in it.
pub fn evaluate_checkpoint(
    data: &StudyData,
    ckpt: &Path,
    averaging: crate::eval::Averaging,
) -> Result<(Metrics, ConfusionMatrix)> {
    let (net, header) = load_checkpoint::<f32>(ckpt)?;
    let choices: Choices = serde_json::from_value(header.extra["choices"].clone())?;
    let encoder: Option<crate::clinical::ClinicalEncoder> =
        serde_json::from_value(header.extra["encoder"].clone()).unwrap_or(None);
    let test_ids: Vec<String> = serde_json::from_value(header.extra["test_ids"].clone())?;
    let samples = data.samples(&choices.modalities);
    let idx = test_ids
        .iter()
        .map(|id| {
            samples
                .iter()
                .position(|s| &s.id() == id)
                .ok_or_else(|| Error::Sample {
                    sample: id.clone(),
                    msg: "not in the cohort for this checkpoint".into(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = data.dataset(&samples, &idx, &net.spec, encoder.as_ref())?;
    let preds = predict_classes(&net, &test, 4)?;
    let cm = confusion(&preds, &test.labels)?;
    Ok((Metrics::from_confusion(&cm, averaging)?, cm))
}

/// Grad-CAM, saliency, overlays and a probability table for test samples of a checkpoint.
pub fn explain_checkpoint(
    data: &StudyData,
    ckpt: &Path,
    out: &Path,
    max_samples: usize,
    only: Option<&[String]>,
) -> Result<Vec<explain::ProbabilityRow>> {
    let (net, header) = load_checkpoint::<f32>(ckpt)?;
    let choices: Choices = serde_json::from_value(header.extra["choices"].clone())?;
    let encoder: Option<crate::clinical::ClinicalEncoder> =
        serde_json::from_value(header.extra["encoder"].clone()).unwrap_or(None);
    let test_ids: Vec<String> =
        serde_json::from_value(header.extra["test_ids"].clone()).unwrap_or_default();
    let samples = data.samples(&choices.modalities);
    let spec = net.spec.clone();
    fs::create_dir_all(out).at(out)?;
    let mut rows = Vec::new();
    let wanted: Vec<&String> = match only {
        Some(ids) => ids.iter().collect(),
        None => test_ids.iter().take(max_samples).collect(),
    };
    for id in wanted {
        let s = samples
            .iter()
            .find(|s| &s.id() == id)
            .ok_or_else(|| Error::Sample {
                sample: id.clone(),
                msg: "not in the cohort for this checkpoint".into(),
            })?;
        let x = data.input(s, &spec)?;
        let clin: Option<Vec<f32>> = match &encoder {
            Some(enc) => {
                let table = data.clinical.as_ref().ok_or_else(|| {
                    Error::Config("checkpoint uses clinical data; data.clinical is not set".into())
                })?;
                let c = table.get(&s.patient_id).ok_or_else(|| Error::Sample {
                    sample: s.id(),
                    msg: "patient missing from clinical table".into(),
                })?;
                Some(enc.encode(c).iter().map(|&v| v as f32).collect())
            }
            None => None,
        };
        let probs = explain::class_probabilities(&net, &x, clin.as_deref())?;
        let (target, source) = explain::resolve_target(&net, &x, clin.as_deref(), None)?;
        let mut cam = explain::grad_cam(&net, &x, clin.as_deref(), target, None)?;
        cam.target_source = source;
        let sal = explain::saliency(&net, &x, clin.as_deref(), target, false)?;
        let mut sal = explain::combine_channels(&sal).expect("at least one channel");
        sal.target_source = source;
        // Background: the current anatomical scan, T2W when present.
        let m = [Modality::T2W, Modality::FLAIR, Modality::T1W, Modality::CT1]
            .into_iter()
            .find(|m| s.curr.image_paths.contains_key(m))
            .expect("kept sessions have at least one modality");
        let reference = VolumeGrid::from_array(data.loader.load_modality(&s.curr, m)?);
        let stem = id.replace("->", "_to_").replace([':', '/'], "_");
        cam.clone()
            .minmax()
            .write_nifti(&reference, &out.join(format!("{stem}_gradcam.nii.gz")))?;
        sal.clone()
            .minmax()
            .write_nifti(&reference, &out.join(format!("{stem}_saliency.nii.gz")))?;
        let slices = explain::even_slices(spec.spatial[0], 3);
        explain::render_overlay(
            &reference,
            &cam,
            &slices,
            &probs,
            &out.join(format!("{stem}_gradcam.png")),
        )?;
        explain::render_overlay(
            &reference,
            &sal,
            &slices,
            &probs,
            &out.join(format!("{stem}_saliency.png")),
        )?;
        let mut row = explain::ProbabilityRow::new(id, &probs, Some(s.class_index()));
        row.target_class = format!("{:?}", RanoLabel::TRAINABLE[target]);
        row.target_source = source.to_string();
        row.cam_saliency_dice = Some(explain::top_decile_dice(&cam, &sal));
        rows.push(row);
    }
    explain::write_probability_table(&out.join("probabilities.csv"), &rows)?;
    Ok(rows)
}

//! Dataset indexing, timepoint exclusion and consecutive-pair construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Number of trainable response classes.
pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RanoLabel {
    PD,
    SD,
    PR,
    CR,
    PreOp,
    PostOp,
    Unlabeled,
}

impl RanoLabel {
    pub const TRAINABLE: [RanoLabel; N_CLASSES] =
        [RanoLabel::PD, RanoLabel::SD, RanoLabel::PR, RanoLabel::CR];

    /// Class index (PD=0, SD=1, PR=2, CR=3) for trainable labels.
    pub fn class_index(self) -> Option<usize> {
        match self {
            RanoLabel::PD => Some(0),
            RanoLabel::SD => Some(1),
            RanoLabel::PR => Some(2),
            RanoLabel::CR => Some(3),
            _ => None,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        Self::TRAINABLE.get(i).copied()
    }

    pub fn is_trainable(self) -> bool {
        self.class_index().is_some()
    }

    /// Parse a rating cell. Empty and `NA`-like cells are `Unlabeled`;
    /// unrecognized text is an error.
    pub fn parse_rating(cell: &str) -> Option<Self> {
        let t = cell.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Some(match t.as_str() {
            "pd" | "progressive-disease" | "progression" => RanoLabel::PD,
            "sd" | "stable-disease" | "stable" => RanoLabel::SD,
            "pr" | "partial-response" => RanoLabel::PR,
            "cr" | "complete-response" => RanoLabel::CR,
            "pre-op" | "preop" | "pre-operative" => RanoLabel::PreOp,
            "post-op" | "postop" | "post-operative" => RanoLabel::PostOp,
            "" | "na" | "n/a" | "none" | "unlabeled" | "unlabelled" => RanoLabel::Unlabeled,
            _ => return None,
        })
    }
}

impl fmt::Display for RanoLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// MRI contrast. The derived ordering is the canonical channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    CT1,
    T1W,
    T2W,
    FLAIR,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::CT1, Modality::T1W, Modality::T2W, Modality::FLAIR];

    /// Recognize a file stem such as `CT1`, `T1`, `t2w` or `flair`.
    pub fn from_stem(stem: &str) -> Option<Self> {
        match stem.to_ascii_uppercase().as_str() {
            "CT1" | "T1C" | "T1CE" | "T1GD" => Some(Modality::CT1),
            "T1" | "T1W" => Some(Modality::T1W),
            "T2" | "T2W" => Some(Modality::T2W),
            "FLAIR" => Some(Modality::FLAIR),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::CT1 => "CT1",
            Modality::T1W => "T1W",
            Modality::T2W => "T2W",
            Modality::FLAIR => "FLAIR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Canonically ordered modality set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct ModalitySet(BTreeSet<Modality>);

impl ModalitySet {
    pub fn new(mods: impl IntoIterator<Item = Modality>) -> Self {
        Self(mods.into_iter().collect())
    }

    pub fn all() -> Self {
        Self::new(Modality::ALL)
    }

    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0.contains(&m)
    }

    pub fn is_subset(&self, other: &ModalitySet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn insert(&mut self, m: Modality) {
        self.0.insert(m);
    }

    /// `CT1+T1W+T2W+FLAIR` style key, also used in file names.
    pub fn key(&self) -> String {
        self.iter()
            .map(Modality::name)
            .collect::<Vec<_>>()
            .join("+")
    }

    /// The five combinations compared in the modality ablation.
    pub fn study_sets() -> Vec<ModalitySet> {
        use Modality::*;
        vec![
            ModalitySet::new([CT1, T1W, T2W, FLAIR]),
            ModalitySet::new([T1W, T2W, FLAIR]),
            ModalitySet::new([CT1]),
            ModalitySet::new([CT1, FLAIR]),
            ModalitySet::new([T1W, FLAIR]),
        ]
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("all") {
            return Ok(Self::all());
        }
        let mut set = ModalitySet::default();
        for part in t.split(['+', ',']) {
            let m = Modality::from_stem(part.trim()).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown modality `{part}` in `{s}`"))
            })?;
            set.insert(m);
        }
        if set.is_empty() {
            return Err(Error::InvalidArgument("empty modality set".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// One imaging session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimepointRecord {
    pub patient_id: String,
    /// Weeks since first surgery as named on disk (may be negative pre-op).
    pub week: i64,
    /// Session directory name, distinguishes same-week pre/post-op sessions.
    pub session: String,
    pub label: RanoLabel,
    pub available: ModalitySet,
    pub image_paths: BTreeMap<Modality, PathBuf>,
}

impl TimepointRecord {
    pub fn key(&self) -> String {
        format!("{}/{}", self.patient_id, self.session)
    }
}

/// A consecutive-timepoint pair: the unit of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySample {
    pub patient_id: String,
    pub prev: TimepointRecord,
    pub curr: TimepointRecord,
    pub modalities: ModalitySet,
    pub label: RanoLabel,
}

impl StudySample {
    /// Stable identifier independent of the modality selection.
    pub fn id(&self) -> String {
        format!("{}:{}->{}", self.patient_id, self.prev.week, self.curr.week)
    }

    pub fn class_index(&self) -> usize {
        self.label
            .class_index()
            .expect("study samples carry trainable labels")
    }
}

/// Column names of the per-session metadata table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetadataSchema {
    pub patient: String,
    /// `44`, `week-044` or `week-044-1`.
    pub week: String,
    pub rating: String,
    /// Week of the first surgery for that patient; empty when unknown.
    pub surgery_week: String,
    pub delimiter: char,
}

impl Default for MetadataSchema {
    fn default() -> Self {
        Self {
            patient: "patient".into(),
            week: "week".into(),
            rating: "rating".into(),
            surgery_week: "surgery_week".into(),
            delimiter: ',',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowIssue {
    pub line: usize,
    pub msg: String,
}

/// Output of [`index_dataset`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetIndex {
    /// Sorted by patient then week then session.
    pub records: Vec<TimepointRecord>,
    /// `None` when the metadata gives no surgery week for the patient.
    pub surgery_weeks: BTreeMap<String, Option<i64>>,
    pub row_errors: Vec<RowIssue>,
}

impl DatasetIndex {
    pub fn by_patient(&self) -> BTreeMap<&str, Vec<&TimepointRecord>> {
        let mut out: BTreeMap<&str, Vec<&TimepointRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.patient_id.as_str()).or_default().push(r);
        }
        out
    }

    /// Patients with a known surgery week.
    pub fn known_surgery_weeks(&self) -> BTreeMap<String, i64> {
        self.surgery_weeks
            .iter()
            .filter_map(|(p, w)| w.map(|w| (p.clone(), w)))
            .collect()
    }
}

/// Parse `44`, `-3`, `week-044` or `week-044-2` into `(week, session name)`.
pub fn parse_week(cell: &str) -> Option<(i64, String)> {
    let t = cell.trim();
    let rest = t
        .strip_prefix("week-")
        .or_else(|| t.strip_prefix("week_"))
        .unwrap_or(t);
    let (neg, digits_and_more) = match rest.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, rest),
    };
    let end = digits_and_more
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(digits_and_more.len());
    if end == 0 {
        return None;
    }
    let mut week: i64 = digits_and_more[..end].parse().ok()?;
    if neg {
        week = -week;
    }
    let suffix = &digits_and_more[end..];
    if !suffix.is_empty() && !suffix.starts_with('-') {
        return None;
    }
    let session = if t.starts_with("week") {
        t.to_string()
    } else {
        format!("week-{rest}")
    };
    Some((week, session))
}

struct MetaRow {
    rating: RanoLabel,
}

/// Index `<root>/<patient>/week-<k>/<modality>.nii[.gz]` against a metadata table.
///
/// Every session directory on disk yields exactly one record; sessions without
/// a metadata row are `Unlabeled`. Malformed rows are reported, not fatal.
pub fn index_dataset(
    root: &Path,
    metadata: &Path,
    schema: &MetadataSchema,
) -> Result<DatasetIndex> {
    let mut index = DatasetIndex::default();
    let mut meta: BTreeMap<(String, String), MetaRow> = BTreeMap::new();

    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(metadata)
        .map_err(|e| Error::Metadata {
            path: metadata.into(),
            msg: e.to_string(),
        })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Metadata {
                path: metadata.into(),
                msg: format!(
                    "missing required column `{name}` (have {:?})",
                    headers.iter().collect::<Vec<_>>()
                ),
            })
    };
    let (c_pat, c_week, c_rating, c_surg) = (
        col(&schema.patient)?,
        col(&schema.week)?,
        col(&schema.rating)?,
        col(&schema.surgery_week)?,
    );

    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                index.row_errors.push(RowIssue {
                    line,
                    msg: e.to_string(),
                });
                continue;
            }
        };
        let get = |c: usize| row.get(c).unwrap_or("").to_string();
        let patient = get(c_pat);
        if patient.is_empty() {
            index.row_errors.push(RowIssue {
                line,
                msg: "empty patient id".into(),
            });
            continue;
        }
        let Some((week, session)) = parse_week(&get(c_week)) else {
            index.row_errors.push(RowIssue {
                line,
                msg: format!("unparsable week `{}`", get(c_week)),
            });
            continue;
        };
        let Some(rating) = RanoLabel::parse_rating(&get(c_rating)) else {
            index.row_errors.push(RowIssue {
                line,
                msg: format!("unknown rating `{}`", get(c_rating)),
            });
            continue;
        };
        let surg_cell = get(c_surg);
        let surgery = if surg_cell.is_empty() || surg_cell.eq_ignore_ascii_case("na") {
            None
        } else {
            match parse_week(&surg_cell) {
                Some((w, _)) => Some(w),
                None => {
                    index.row_errors.push(RowIssue {
                        line,
                        msg: format!("unparsable surgery week `{surg_cell}`"),
                    });
                    None
                }
            }
        };
        let slot = index.surgery_weeks.entry(patient.clone()).or_insert(None);
        if slot.is_none() {
            *slot = surgery;
        }
        if meta
            .insert((patient.clone(), session.clone()), MetaRow { rating })
            .is_some()
        {
            return Err(Error::DuplicateSession { patient, week });
        }
        let _ = week;
    }

    if !root.exists() {
        return Err(Error::Io {
            path: root.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root missing"),
        });
    }
    let mut patients: Vec<PathBuf> = fs::read_dir(root)
        .at(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    patients.sort();
    for pdir in patients {
        let patient = pdir.file_name().unwrap().to_string_lossy().to_string();
        let mut seen_weeks: BTreeMap<String, i64> = BTreeMap::new();
        let mut sessions: Vec<PathBuf> = fs::read_dir(&pdir)
            .at(&pdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        sessions.sort();
        for sdir in sessions {
            let name = sdir.file_name().unwrap().to_string_lossy().to_string();
            let Some((week, session)) = parse_week(&name) else {
                continue;
            };
            if seen_weeks.insert(session.clone(), week).is_some() {
                return Err(Error::DuplicateSession { patient, week });
            }
            let mut image_paths = BTreeMap::new();
            let mut files: Vec<PathBuf> = fs::read_dir(&sdir)
                .at(&sdir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let fname = f.file_name().unwrap().to_string_lossy().to_string();
                let stem = fname
                    .strip_suffix(".nii.gz")
                    .or_else(|| fname.strip_suffix(".nii"));
                if let Some(m) = stem.and_then(Modality::from_stem) {
                    image_paths.entry(m).or_insert(f);
                }
            }
            let label = meta
                .get(&(patient.clone(), session.clone()))
                .map(|m| m.rating)
                .unwrap_or(RanoLabel::Unlabeled);
            index.surgery_weeks.entry(patient.clone()).or_insert(None);
            index.records.push(TimepointRecord {
                patient_id: patient.clone(),
                week,
                session,
                label,
                available: ModalitySet::new(image_paths.keys().copied()),
                image_paths,
            });
        }
    }
    index.records.sort_by(|a, b| {
        (&a.patient_id, a.week, &a.session).cmp(&(&b.patient_id, b.week, &b.session))
    });
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    NotTrainableLabel,
    WithinSurgeryWindow,
    NoModality,
    NoSurgeryWeek,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<TimepointRecord>,
    pub excluded: Vec<(String, ExclusionReason)>,
}

/// Drop untrainable labels, sessions fewer than `min_gap_weeks` after surgery,
/// sessions without any modality, and every session of patients with no
/// known surgery week. Input order is preserved.
pub fn filter_timepoints(
    records: &[TimepointRecord],
    surgery_weeks: &BTreeMap<String, i64>,
    min_gap_weeks: i64,
) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for r in records {
        let reason = match surgery_weeks.get(&r.patient_id) {
            None => Some(ExclusionReason::NoSurgeryWeek),
            Some(_) if !r.label.is_trainable() => Some(ExclusionReason::NotTrainableLabel),
            Some(&s) if r.week - s < min_gap_weeks => Some(ExclusionReason::WithinSurgeryWindow),
            Some(_) if r.available.is_empty() => Some(ExclusionReason::NoModality),
            Some(_) => None,
        };
        match reason {
            Some(reason) => {
                if reason == ExclusionReason::NoSurgeryWeek {
                    log::warn!("{}: no surgery week, excluded", r.key());
                }
                out.excluded.push((r.key(), reason));
            }
            None => out.kept.push(r.clone()),
        }
    }
    out
}

/// Pair each patient's adjacent filtered timepoints when both carry `modalities`.
///
/// Adjacency is over the filtered sequence: an intermediate session lacking
/// the requested modalities breaks both pairs it belongs to.
pub fn pair_consecutive(
    filtered: &[TimepointRecord],
    modalities: &ModalitySet,
) -> Vec<StudySample> {
    let mut by_patient: BTreeMap<&str, Vec<&TimepointRecord>> = BTreeMap::new();
    for r in filtered {
        by_patient.entry(r.patient_id.as_str()).or_default().push(r);
    }
    let mut samples = Vec::new();
    for (patient, mut tps) in by_patient {
        tps.sort_by_key(|r| r.week);
        for w in tps.windows(2) {
            let (prev, curr) = (w[0], w[1]);
            if prev.week == curr.week {
                continue;
            }
            if modalities.is_subset(&prev.available) && modalities.is_subset(&curr.available) {
                samples.push(StudySample {
                    patient_id: patient.to_string(),
                    prev: prev.clone(),
                    curr: curr.clone(),
                    modalities: modalities.clone(),
                    label: curr.label,
                });
            }
        }
    }
    samples
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub total: usize,
    pub counts: [usize; N_CLASSES],
    pub prevalence: [f64; N_CLASSES],
}

pub fn class_counts<'a>(labels: impl IntoIterator<Item = &'a RanoLabel>) -> [usize; N_CLASSES] {
    let mut counts = [0; N_CLASSES];
    for l in labels {
        if let Some(i) = l.class_index() {
            counts[i] += 1;
        }
    }
    counts
}

pub fn cohort_summary(samples: &[StudySample]) -> Result<CohortSummary> {
    if samples.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let counts = class_counts(samples.iter().map(|s| &s.label));
    let total: usize = counts.iter().sum();
    let mut prevalence = [0.0; N_CLASSES];
    for (p, &c) in prevalence.iter_mut().zip(&counts) {
        *p = c as f64 / total as f64;
    }
    Ok(CohortSummary {
        total,
        counts,
        prevalence,
    })
}

/// One JSON object per line.
pub fn write_manifest(path: &Path, samples: &[StudySample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let f = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<StudySample>> {
    let f = fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tp(patient: &str, week: i64, label: RanoLabel, mods: &[Modality]) -> TimepointRecord {
        TimepointRecord {
            patient_id: patient.into(),
            week,
            session: format!("week-{week:03}"),
            label,
            available: ModalitySet::new(mods.iter().copied()),
            image_paths: mods
                .iter()
                .map(|&m| (m, PathBuf::from(format!("{m}.nii.gz"))))
                .collect(),
        }
    }

    #[test]
    fn adjacency_labels_follow_later_timepoint() {
        use Modality::*;
        let all = [CT1, T1W, T2W, FLAIR];
        let recs = vec![
            tp("p1", 20, RanoLabel::SD, &all),
            tp("p1", 30, RanoLabel::SD, &all),
            tp("p1", 45, RanoLabel::PD, &all),
        ];
        let s = pair_consecutive(&recs, &ModalitySet::all());
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, RanoLabel::SD);
        assert_eq!(s[1].label, RanoLabel::PD);
    }

    #[test]
    fn ineligible_middle_breaks_both_pairs() {
        use Modality::*;
        let all = [CT1, T1W, T2W, FLAIR];
        let recs = vec![
            tp("p1", 20, RanoLabel::SD, &all),
            tp("p1", 30, RanoLabel::SD, &[CT1, T1W, T2W]),
            tp("p1", 45, RanoLabel::PD, &all),
        ];
        assert!(pair_consecutive(&recs, &ModalitySet::new([CT1, FLAIR])).is_empty());
    }

    #[test]
    fn early_postsurgery_session_is_excluded() {
        let recs = vec![tp("p1", 2, RanoLabel::PD, &[Modality::CT1])];
        let surg = BTreeMap::from([("p1".to_string(), 0)]);
        let out = filter_timepoints(&recs, &surg, 13);
        assert!(out.kept.is_empty());
        assert_eq!(out.excluded[0].1, ExclusionReason::WithinSurgeryWindow);
    }

    #[test]
    fn patient_without_surgery_week_dropped() {
        let recs = vec![tp("p1", 40, RanoLabel::PD, &[Modality::CT1])];
        let out = filter_timepoints(&recs, &BTreeMap::new(), 13);
        assert!(out.kept.is_empty());
        assert_eq!(out.excluded[0].1, ExclusionReason::NoSurgeryWeek);
    }

    #[test]
    fn summary_uniform_and_empty() {
        use Modality::*;
        let mut recs = Vec::new();
        let labels = [RanoLabel::PD, RanoLabel::SD, RanoLabel::PR, RanoLabel::CR];
        for (i, l) in labels.iter().enumerate() {
            recs.push(tp("p", 20 + 2 * i as i64, RanoLabel::SD, &[CT1]));
            recs.push(tp("p", 21 + 2 * i as i64, *l, &[CT1]));
        }
        let samples: Vec<_> = pair_consecutive(&recs, &ModalitySet::new([CT1]))
            .into_iter()
            .filter(|s| s.curr.week % 2 == 1)
            .collect();
        let s = cohort_summary(&samples).unwrap();
        assert_eq!(s.counts, [1, 1, 1, 1]);
        assert!(s.prevalence.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(matches!(cohort_summary(&[]), Err(Error::EmptyCohort)));
    }

    #[test]
    fn week_cells() {
        assert_eq!(parse_week("44"), Some((44, "week-44".into())));
        assert_eq!(parse_week("week-044"), Some((44, "week-044".into())));
        assert_eq!(parse_week("week-000-2"), Some((0, "week-000-2".into())));
        assert_eq!(parse_week("week--3").map(|w| w.0), Some(-3));
        assert_eq!(parse_week("abc"), None);
    }

    #[test]
    fn modality_set_parsing_is_canonical() {
        let a: ModalitySet = "FLAIR+T1".parse().unwrap();
        let b: ModalitySet = "T1W,flair".parse().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.key(), "T1W+FLAIR");
    }
}

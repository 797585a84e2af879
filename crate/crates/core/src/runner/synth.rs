//! Synthetic longitudinal cohort laid out like the real dataset, for smoke runs and tests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Modality, RanoLabel};
use crate::error::{IoContext, Result};
use crate::volume::{Orientation, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Labeled follow-up sessions per patient after the surgery window.
    pub followups: usize,
    pub grid: [usize; 3],
    pub seed: u64,
    pub noise: f64,
    /// Add the irregular cases: missing scans, unknown surgery week,
    /// unrated sessions, early post-operative scans and split-week sessions.
    pub edge_cases: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 12,
            followups: 4,
            grid: [16, 16, 16],
            seed: 0,
            noise: 0.05,
            edge_cases: true,
        }
    }
}

/// Paths of a generated fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub root: PathBuf,
    pub images: PathBuf,
    pub metadata: PathBuf,
    pub clinical: PathBuf,
    pub template: PathBuf,
    pub config: PathBuf,
    pub sessions: usize,
}

/// Relative size change of the enhancing lesion for each rating.
fn growth(label: RanoLabel) -> f64 {
    match label {
        RanoLabel::PD => 1.5,
        RanoLabel::SD => 1.0,
        RanoLabel::PR => 0.55,
        RanoLabel::CR => 0.0,
        _ => 1.0,
    }
}

fn rating_cell(label: RanoLabel) -> &'static str {
    match label {
        RanoLabel::PD => "Progressive Disease",
        RanoLabel::SD => "Stable Disease",
        RanoLabel::PR => "Partial Response",
        RanoLabel::CR => "Complete Response",
        RanoLabel::PreOp => "Pre-Op",
        RanoLabel::PostOp => "Post-Op",
        RanoLabel::Unlabeled => "",
    }
}

/// Lesion and oedema intensity offsets per modality.
fn contrast(m: Modality) -> (f64, f64) {
    match m {
        Modality::CT1 => (1.6, 0.2),
        Modality::T1W => (-0.4, -0.2),
        Modality::T2W => (1.0, 0.8),
        Modality::FLAIR => (0.8, 1.0),
    }
}

fn head_mask(grid: [usize; 3], z: usize, y: usize, x: usize) -> f64 {
    let c = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    let r2 = c(z, grid[0]).powi(2) + c(y, grid[1]).powi(2) + c(x, grid[2]).powi(2);
    if r2 < 0.8 {
        1.0
    } else {
        0.0
    }
}

fn render(
    grid: [usize; 3],
    m: Modality,
    center: [f64; 3],
    radius: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let (lesion, oedema) = contrast(m);
    let n = Normal::new(0.0, noise.max(1e-9)).unwrap();
    let base = match m {
        Modality::T1W | Modality::CT1 => 1.0,
        _ => 0.7,
    };
    Array3::from_shape_fn((grid[0], grid[1], grid[2]), |(z, y, x)| {
        let head = head_mask(grid, z, y, x);
        let d = ((z as f64 - center[0]).powi(2)
            + (y as f64 - center[1]).powi(2)
            + (x as f64 - center[2]).powi(2))
        .sqrt();
        let mut v = base * head;
        if radius > 0.0 {
            if d <= radius {
                v += lesion;
            } else if d <= radius * 1.6 + 1.0 {
                v += oedema * head;
            }
        }
        (v + n.sample(rng)) as f32
    })
}

fn write_volume(path: &Path, voxels: Array3<f32>) -> Result<()> {
    VolumeGrid::new(voxels, [1.0; 3], Some(Orientation::RAS)).write_nifti(path)
}

struct Session {
    dir: String,
    label: RanoLabel,
    radius: f64,
    missing: Vec<Modality>,
    in_metadata: bool,
}

/// Next rating given the current lesion radius: a vanished lesion can only
/// stay absent or recur.
fn next_label(rng: &mut ChaCha8Rng, radius: f64, max_radius: f64) -> RanoLabel {
    if radius <= 0.0 {
        return if rng.random_bool(0.5) {
            RanoLabel::CR
        } else {
            RanoLabel::PD
        };
    }
    let mut options = vec![RanoLabel::SD, RanoLabel::PR, RanoLabel::CR];
    if radius * growth(RanoLabel::PD) <= max_radius {
        options.push(RanoLabel::PD);
        options.push(RanoLabel::PD);
    }
    options[rng.random_range(0..options.len())]
}

/// Write a fixture under `dir`: `images/Patient-XXX/week-NNN[-k]/{CT1,T1,T2,FLAIR}.nii.gz`,
/// `metadata.csv`, `clinical.csv`, `template.nii.gz` and `study.toml`.
pub fn generate(dir: &Path, cfg: &SynthConfig) -> Result<SynthDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images = dir.join("images");
    fs::create_dir_all(&images).at(&images)?;
    let g = cfg.grid;
    let min_extent = g.iter().copied().min().unwrap_or(1) as f64;
    let max_radius = (min_extent / 4.0).max(1.5);
    let mut meta = String::from("patient,week,rating,surgery_week\n");
    let mut clinical = String::from("patient,age,sex,idh,mgmt,survival_weeks\n");
    let mut n_sessions = 0;

    for p in 0..cfg.n_patients {
        let patient = format!("Patient-{:03}", p + 1);
        let unknown_surgery = cfg.edge_cases && p == cfg.n_patients.saturating_sub(1) && p > 0;
        let center = [
            g[0] as f64 / 2.0 + rng.random_range(-1.0..1.0),
            g[1] as f64 / 2.0 + rng.random_range(-1.0..1.0),
            g[2] as f64 / 2.0 + rng.random_range(-1.0..1.0),
        ];
        let mut radius = rng.random_range(1.0..max_radius);
        let mut sessions = vec![
            Session {
                dir: "week-000".into(),
                label: RanoLabel::PreOp,
                radius,
                missing: vec![],
                in_metadata: true,
            },
            Session {
                dir: "week-000-1".into(),
                label: RanoLabel::PostOp,
                radius: radius * 0.6,
                missing: vec![],
                in_metadata: true,
            },
        ];
        radius *= 0.6;
        if cfg.edge_cases && p % 4 == 1 {
            // Rated but inside the post-surgery window.
            let label = next_label(&mut rng, radius, max_radius);
            radius *= growth(label);
            sessions.push(Session {
                dir: "week-006".into(),
                label,
                radius,
                missing: vec![],
                in_metadata: true,
            });
        }
        let mut week = 14;
        for k in 0..cfg.followups {
            let mut label = next_label(&mut rng, radius, max_radius);
            if radius <= 0.0 && label == RanoLabel::PD {
                radius = 1.5;
            } else {
                radius *= growth(label);
            }
            let mut missing = vec![];
            let mut in_metadata = true;
            if cfg.edge_cases {
                if p % 3 == 0 && k == 1 {
                    missing.push(Modality::FLAIR);
                }
                if p % 5 == 2 && k == 2 {
                    missing.push(Modality::CT1);
                }
                if p % 4 == 3 && k == cfg.followups - 1 {
                    in_metadata = false;
                    label = RanoLabel::Unlabeled;
                }
            }
            sessions.push(Session {
                dir: format!("week-{week:03}"),
                label,
                radius,
                missing,
                in_metadata,
            });
            week += rng.random_range(8..16);
        }

        for s in &sessions {
            let sdir = images.join(&patient).join(&s.dir);
            fs::create_dir_all(&sdir).at(&sdir)?;
            for m in Modality::ALL {
                if s.missing.contains(&m) {
                    continue;
                }
                let file = match m {
                    Modality::CT1 => "CT1",
                    Modality::T1W => "T1",
                    Modality::T2W => "T2",
                    Modality::FLAIR => "FLAIR",
                };
                let v = render(g, m, center, s.radius, cfg.noise, &mut rng);
                write_volume(&sdir.join(format!("{file}.nii.gz")), v)?;
            }
            if s.in_metadata {
                let _ = writeln!(
                    meta,
                    "{patient},{},{},{}",
                    s.dir,
                    rating_cell(s.label),
                    if unknown_surgery { "NA" } else { "0" }
                );
            }
            n_sessions += 1;
        }

        let sex = if rng.random_bool(0.5) { "M" } else { "F" };
        let idh = ["wildtype", "mutant", "NA"][rng.random_range(0..3)];
        let mgmt = ["methylated", "unmethylated", "NA"][rng.random_range(0..3)];
        let _ = writeln!(
            clinical,
            "{patient},{:.1},{sex},{idh},{mgmt},{}",
            rng.random_range(35.0..80.0),
            rng.random_range(20..150)
        );
    }

    let metadata = dir.join("metadata.csv");
    fs::write(&metadata, meta).at(&metadata)?;
    let clinical_path = dir.join("clinical.csv");
    fs::write(&clinical_path, clinical).at(&clinical_path)?;
    let template = dir.join("template.nii.gz");
    write_volume(
        &template,
        Array3::from_shape_fn((g[0], g[1], g[2]), |(z, y, x)| head_mask(g, z, y, x) as f32),
    )?;
    let config = dir.join("study.toml");
    fs::write(&config, sample_config(g)).at(&config)?;
    Ok(SynthDataset {
        root: dir.to_path_buf(),
        images,
        metadata,
        clinical: clinical_path,
        template,
        config,
        sessions: n_sessions,
    })
}

/// A small two-fold study over the fixture, with every axis reduced to two options.
pub fn sample_config(grid: [usize; 3]) -> String {
    format!(
        r#"[data]
root = "images"
metadata = "metadata.csv"
clinical = "clinical.csv"
grid = [{}, {}, {}]
min_gap_weeks = 13

[preprocess]
enabled = false
template = "template.nii.gz"
cache_dir = "cache"

[study]
seed = 7
n_folds = 2
output = "runs/study"
vit_patch = 8
explain_samples = 2

[train]
lr = 0.001
batch_size = 4
max_epochs = 3
patience = 2

[axes]
subtraction = [false, true]
modalities = ["CT1+T1W+T2W+FLAIR", "CT1"]
architecture = ["densenet121", "alexnet3d"]
pretraining = [{{ kind = "None" }}, {{ kind = "RotationSelfSupervised", n_rotations = 4, epochs = 1 }}]
clinical = [false, true]
"#,
        grid[0], grid[1], grid[2]
    )
}

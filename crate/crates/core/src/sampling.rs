//! Stratified folds, imbalance-aware sampling, class loss weights and
//! training-time augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array4, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cohort::{class_counts, StudySample, N_CLASSES};
use crate::error::{Error, IoContext, Result};
use rano_tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub grouped_by_patient: bool,
    /// Sample id to fold index, in input order.
    pub assignments: IndexMap<String, usize>,
    pub per_fold_class_counts: Vec<[usize; N_CLASSES]>,
    pub warnings: Vec<String>,
}

impl FoldPlan {
    /// Indices into `samples` of the training and held-out parts of `fold`.
    pub fn split(&self, samples: &[StudySample], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in samples.iter().enumerate() {
            let id = s.id();
            let f = *self.assignments.get(&id).ok_or_else(|| Error::Sample {
                sample: id.clone(),
                msg: "not in fold plan".into(),
            })?;
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, test))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d).at(d)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path).at(path)?)?)
    }
}

/// Stratified assignment: each class is shuffled and dealt round-robin, the
/// dealer position carrying over between classes so fold sizes also balance.
/// With `group_by_patient`, whole patients are dealt greedily instead and the
/// per-class balance is best effort.
pub fn make_folds(
    samples: &[StudySample],
    n_folds: usize,
    seed: u64,
    group_by_patient: bool,
) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_folds must be at least 2, got {n_folds}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let counts = class_counts(samples.iter().map(|s| &s.label));
    for (c, &n) in counts.iter().enumerate() {
        if n < n_folds {
            let w = format!(
                "class {} has {n} samples for {n_folds} folds; some folds lack it",
                crate::cohort::RanoLabel::TRAINABLE[c]
            );
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let mut fold_of = vec![0usize; samples.len()];
    if group_by_patient {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry(&s.patient_id).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        groups.shuffle(&mut rng);
        groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
        let mut fold_counts = vec![[0usize; N_CLASSES]; n_folds];
        for g in groups {
            let gc = class_counts(g.iter().map(|&i| &samples[i].label));
            let best = (0..n_folds)
                .min_by_key(|&f| {
                    let load: usize = (0..N_CLASSES)
                        .map(|c| (fold_counts[f][c] + gc[c]).pow(2))
                        .sum();
                    (load, fold_counts[f].iter().sum::<usize>(), f)
                })
                .unwrap();
            for c in 0..N_CLASSES {
                fold_counts[best][c] += gc[c];
            }
            for i in g {
                fold_of[i] = best;
            }
        }
    } else {
        let mut dealer = 0;
        for c in 0..N_CLASSES {
            let mut idx: Vec<usize> = (0..samples.len())
                .filter(|&i| samples[i].label.class_index() == Some(c))
                .collect();
            idx.shuffle(&mut rng);
            for i in idx {
                fold_of[i] = dealer;
                dealer = (dealer + 1) % n_folds;
            }
        }
    }
    let mut per_fold_class_counts = vec![[0usize; N_CLASSES]; n_folds];
    let mut assignments = IndexMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(c) = s.label.class_index() {
            per_fold_class_counts[fold_of[i]][c] += 1;
        }
        if assignments.insert(s.id(), fold_of[i]).is_some() {
            return Err(Error::Sample {
                sample: s.id(),
                msg: "duplicate sample id".into(),
            });
        }
    }
    Ok(FoldPlan {
        n_folds,
        seed,
        grouped_by_patient: group_by_patient,
        assignments,
        per_fold_class_counts,
        warnings,
    })
}

pub fn prevalence_from_counts(counts: &[usize; N_CLASSES]) -> [f64; N_CLASSES] {
    let n: usize = counts.iter().sum();
    counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeighting {
    pub weights: IndexMap<String, f64>,
    pub prevalence: [f64; N_CLASSES],
}

impl SampleWeighting {
    pub fn values(&self) -> Vec<f64> {
        self.weights.values().copied().collect()
    }
}

/// `W(s) = 1 - P(class(s))`.
pub fn compute_sample_weights(
    samples: &[StudySample],
    prevalence: [f64; N_CLASSES],
) -> Result<SampleWeighting> {
    let total: f64 = prevalence.iter().sum();
    if (total - 1.0).abs() > 1e-9 || prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument(format!(
            "prevalences {prevalence:?} do not form a distribution"
        )));
    }
    let mut weights = IndexMap::new();
    for s in samples {
        weights.insert(s.id(), 1.0 - prevalence[s.class_index()]);
    }
    if !weights.values().any(|&w| w > 0.0) {
        return Err(Error::DegenerateSampler(
            "every sample weight is zero (single-class cohort)".into(),
        ));
    }
    Ok(SampleWeighting {
        weights,
        prevalence,
    })
}

/// `n` indices drawn with replacement, probability proportional to weight.
pub fn weighted_draw(weights: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "draw count must be at least 1".into(),
        ));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::DegenerateSampler(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

/// `w_c = 1 / P(c)`.
pub fn compute_class_loss_weights(prevalence: [f64; N_CLASSES]) -> Result<[f64; N_CLASSES]> {
    if prevalence.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "zero prevalence in {prevalence:?}"
        )));
    }
    Ok(prevalence.map(|p| 1.0 / p))
}

/// Loss weights from training-split counts; add-one smoothing when a class is absent.
pub fn class_loss_weights_from_counts(counts: &[usize; N_CLASSES]) -> [f64; N_CLASSES] {
    if counts.iter().all(|&c| c > 0) {
        return compute_class_loss_weights(prevalence_from_counts(counts)).unwrap();
    }
    log::warn!(
        "class absent from training split {counts:?}; add-one smoothing applied to loss weights"
    );
    let n: usize = counts.iter().sum();
    counts.map(|c| (n + N_CLASSES) as f64 / (c + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub flip_prob_per_axis: f64,
    pub intensity_scale_prob: f64,
    pub intensity_scale_factor: f64,
    pub contrast_prob: f64,
    pub gamma_range: (f64, f64),
    pub noise_prob: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            flip_prob_per_axis: 0.5,
            intensity_scale_prob: 0.9,
            intensity_scale_factor: 0.1,
            contrast_prob: 0.9,
            gamma_range: (0.7, 1.5),
            noise_prob: 0.9,
            noise_mean: 0.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            flip_prob_per_axis: 0.0,
            intensity_scale_prob: 0.0,
            contrast_prob: 0.0,
            noise_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_prob_per_axis,
            self.intensity_scale_prob,
            self.contrast_prob,
            self.noise_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "augmentation probabilities must lie in [0, 1]: {probs:?}"
            )));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config(format!(
                "gamma range ({lo}, {hi}) must satisfy 0 < low < high"
            )));
        }
        if self.noise_std < 0.0 || self.intensity_scale_factor < 0.0 {
            return Err(Error::Config("negative noise std or scale factor".into()));
        }
        Ok(())
    }
}

/// What one call to [`augment`] drew.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    pub scale: Option<f64>,
    pub gamma: Option<f64>,
    pub noise: bool,
}

/// Augment a `[C, D, H, W]` stack in place. Flips, the scale factor `1 + u`
/// (u uniform in `[-f, f]`) and the gamma are shared by all channels; the
/// gamma is drawn log-uniformly and applied per channel after min-max
/// rescaling; noise is drawn independently per voxel.
pub fn augment<T: Scalar>(
    x: &mut Array4<T>,
    p: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> AugmentDraw {
    let mut d = AugmentDraw::default();
    for ax in 0..3 {
        if rng.random::<f64>() < p.flip_prob_per_axis {
            d.flips[ax] = true;
            x.invert_axis(Axis(ax + 1));
        }
    }
    if d.flips.iter().any(|&f| f) {
        *x = x.as_standard_layout().into_owned();
    }
    if rng.random::<f64>() < p.intensity_scale_prob {
        let f = p.intensity_scale_factor;
        let u = if f > 0.0 {
            rng.random_range(-f..=f)
        } else {
            0.0
        };
        d.scale = Some(u);
        let s = T::lit(1.0 + u);
        x.mapv_inplace(|v| v * s);
    }
    if rng.random::<f64>() < p.contrast_prob {
        let (lo, hi) = p.gamma_range;
        let g = rng.random_range(lo.ln()..=hi.ln()).exp();
        d.gamma = Some(g);
        for mut ch in x.axis_iter_mut(Axis(0)) {
            let mn = ch.iter().fold(f64::INFINITY, |a, v| a.min(v.as_f64()));
            let mx = ch.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
            let range = mx - mn;
            if range > 0.0 {
                ch.mapv_inplace(|v| T::lit(((v.as_f64() - mn) / range).powf(g) * range + mn));
            }
        }
    }
    if rng.random::<f64>() < p.noise_prob {
        d.noise = true;
        let n = Normal::new(p.noise_mean, p.noise_std).expect("valid noise std");
        x.mapv_inplace(|v| v + T::lit(n.sample(rng)));
    }
    d
}

//! Training loop, early stopping, learning-rate decay and pretraining.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rano_tensor::{Adam, Graph, ParamKind, Scalar};
use serde::{Deserialize, Serialize};

use crate::cohort::N_CLASSES;
use crate::error::{Error, IoContext, Result};
use crate::models::checkpoint::{load_backbone, read_checkpoint};
use crate::models::{stack_batch, Mode, Network};
use crate::sampling::{
    augment, class_loss_weights_from_counts, prevalence_from_counts, weighted_draw,
    AugmentationPolicy,
};
use crate::seeds::derive_seed;
use crate::volume::VolumeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_decay_factor: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    /// Evaluate accuracy on the un-augmented training split after every epoch.
    pub track_train_accuracy: bool,
    /// Stop as soon as training accuracy reaches 1.
    pub stop_at_perfect_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 4,
            max_epochs: 100,
            patience: 10,
            lr_decay_factor: 10.0,
            bn_momentum: 0.1,
            seed: 0,
            augmentation: AugmentationPolicy::default(),
            track_train_accuracy: false,
            stop_at_perfect_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lr,
            self.weight_decay,
            self.lr_decay_factor,
            self.bn_momentum,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
        {
            return Err(Error::Config(format!(
                "training values must be positive: {self:?}"
            )));
        }
        if self.patience >= self.max_epochs {
            log::warn!(
                "patience {} not below max_epochs {}",
                self.patience,
                self.max_epochs
            );
        }
        self.augmentation.validate()
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let h = Sha256::digest(serde_json::to_vec(self).expect("serializable config"));
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    PerfectTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub train_accuracy: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).at(d)?;
        }
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&serde_json::json!({
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
        }))?);
        s.push('\n');
        std::fs::write(path, s).at(path)
    }
}

/// What the controller decided after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochDecision {
    pub improved: bool,
    pub lr_decayed: bool,
    pub stop: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
}

/// Early stopping on strict test-loss improvement, and learning-rate decay
/// whenever the epoch-mean training loss fails to drop below the previous
/// epoch's. The two mechanisms are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochController {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    prev_train: Option<f64>,
    epoch: usize,
}

impl EpochController {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        Self {
            lr,
            decay,
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            prev_train: None,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, train_loss: f64, test_loss: f64) -> EpochDecision {
        let lr_decayed = matches!(self.prev_train, Some(p) if train_loss >= p);
        if lr_decayed {
            self.lr /= self.decay;
        }
        self.prev_train = Some(train_loss);
        let improved = test_loss < self.best_loss;
        if improved {
            self.best_loss = test_loss;
            self.best_epoch = self.epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.epoch += 1;
        EpochDecision {
            improved,
            lr_decayed,
            stop: self.since_best >= self.patience,
            lr: self.lr,
        }
    }
}

/// In-memory samples: assembled inputs, class indices and optional clinical rows.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub ids: Vec<String>,
    pub inputs: Vec<Arc<Array4<T>>>,
    pub labels: Vec<usize>,
    pub clinical: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            inputs: idx.iter().map(|&i| Arc::clone(&self.inputs[i])).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            clinical: self
                .clinical
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i].clone()).collect()),
        }
    }

    fn clinical_batch(&self, idx: &[usize], width: usize) -> Result<Option<Array2<T>>> {
        let Some(rows) = &self.clinical else {
            return Ok(None);
        };
        let mut out = Array2::zeros((idx.len(), width));
        for (r, &i) in idx.iter().enumerate() {
            if rows[i].len() != width {
                return Err(Error::Sample {
                    sample: self.ids[i].clone(),
                    msg: format!(
                        "clinical vector has {} values, model expects {width}",
                        rows[i].len()
                    ),
                });
            }
            for (c, &v) in rows[i].iter().enumerate() {
                out[[r, c]] = v;
            }
        }
        Ok(Some(out))
    }
}

fn weighted_loss<T: Scalar>(
    net: &Network<T>,
    x: ArrayD<T>,
    clinical: Option<Array2<T>>,
    targets: &[usize],
    weights: &[T],
) -> Result<(f64, Array2<T>)> {
    let mut g = Graph::new();
    let xi = g.input(x, false);
    let ci = clinical.map(|c| g.input(c.into_dyn(), false));
    let out = net.forward(&mut g, xi, ci, Mode::Eval)?;
    let loss = g.weighted_cross_entropy(out.logits, targets, weights);
    let logits = g.value(out.logits).clone().into_dimensionality().unwrap();
    Ok((g.value(loss).first().unwrap().as_f64(), logits))
}

/// Mean loss (weighted by batch size) and accuracy in evaluation mode.
pub fn evaluate_loss<T: Scalar>(
    net: &Network<T>,
    data: &Dataset<T>,
    weights: &[T],
    batch: usize,
) -> Result<(f64, f64)> {
    let (mut total, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = stack_batch(&chunk.iter().map(|&i| &*data.inputs[i]).collect::<Vec<_>>());
        let c = data.clinical_batch(chunk, net.clinical_dim)?;
        let t: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let (l, logits) = weighted_loss(net, x, c, &t, weights)?;
        total += l * chunk.len() as f64;
        for (row, &y) in logits.rows().into_iter().zip(&t) {
            correct += usize::from(argmax(row.iter().copied()) == y);
        }
    }
    Ok((
        total / data.len() as f64,
        correct as f64 / data.len() as f64,
    ))
}

pub fn argmax<T: Scalar>(xs: impl Iterator<Item = T>) -> usize {
    xs.enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Predicted class indices in evaluation mode.
pub fn predict_classes<T: Scalar>(
    net: &Network<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = stack_batch(&chunk.iter().map(|&i| &*data.inputs[i]).collect::<Vec<_>>());
        let c = data.clinical_batch(chunk, net.clinical_dim)?;
        let o = net.predict(x, c)?;
        out.extend(
            o.logits
                .rows()
                .into_iter()
                .map(|r| argmax(r.iter().copied())),
        );
    }
    Ok(out)
}

/// Train on `train`, select the epoch with the lowest `test` loss, and
/// return that network. `on_epoch` sees every completed epoch.
pub fn train_fold<T: Scalar>(
    mut net: Network<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Network<T>, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "empty training or test split".into(),
        ));
    }
    let counts = train.class_counts();
    let prevalence = prevalence_from_counts(&counts);
    let sample_w: Vec<f64> = train.labels.iter().map(|&c| 1.0 - prevalence[c]).collect();
    if !sample_w.iter().any(|&w| w > 0.0) {
        return Err(Error::DegenerateSampler(
            "training split holds a single class".into(),
        ));
    }
    let loss_w: Vec<T> = class_loss_weights_from_counts(&counts)
        .iter()
        .map(|&w| T::lit(w))
        .collect();
    let mut opt = Adam::new(T::lit(cfg.lr), T::lit(cfg.weight_decay));
    let mut ctl = EpochController::new(cfg.lr, cfg.lr_decay_factor, cfg.patience);
    let mut best = net.params.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let es = epoch.to_string();
        let draws = weighted_draw(
            &sample_w,
            train.len(),
            derive_seed(cfg.seed, &["draw", &es]),
        )?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in draws.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<Array4<T>> = chunk
                .iter()
                .map(|&i| {
                    let mut x = (*train.inputs[i]).clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &["augment", &train.ids[i], &es],
                    ));
                    augment(&mut x, &cfg.augmentation, &mut rng);
                    x
                })
                .collect();
            let x = stack_batch(&xs.iter().collect::<Vec<_>>());
            let clinical = train.clinical_batch(chunk, net.clinical_dim)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let xi = g.input(x, false);
            let ci = clinical.map(|c| g.input(c.into_dyn(), false));
            let mode = Mode::Train {
                dropout_seed: derive_seed(cfg.seed, &["dropout", &es, &b.to_string()]),
            };
            let out = net.forward(&mut g, xi, ci, mode)?;
            let loss = g.weighted_cross_entropy(out.logits, &targets, &loss_w);
            let lv = g.value(loss).first().unwrap().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    lr: ctl.lr,
                    batch: chunk.iter().map(|&i| train.ids[i].clone()).collect(),
                });
            }
            let grads = g.backward(loss);
            opt.step(&mut net.params, &grads);
            let stats = g.take_batch_stats();
            net.params
                .apply_batch_stats(&stats, T::lit(cfg.bn_momentum));
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        let (test_loss, _) = evaluate_loss(&net, test, &loss_w, cfg.batch_size)?;
        if !test_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                lr: ctl.lr,
                batch: test.ids.clone(),
            });
        }
        let train_accuracy = if cfg.track_train_accuracy || cfg.stop_at_perfect_train {
            let pred = predict_classes(&net, train, cfg.batch_size)?;
            Some(
                pred.iter()
                    .zip(&train.labels)
                    .filter(|(a, b)| a == b)
                    .count() as f64
                    / train.len() as f64,
            )
        } else {
            None
        };
        let lr_used = ctl.lr;
        let d = ctl.observe(train_loss, test_loss);
        if d.improved {
            best = net.params.clone();
        }
        opt.lr = T::lit(d.lr);
        let rec = EpochRecord {
            epoch,
            train_loss,
            test_loss,
            lr: lr_used,
            train_accuracy,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} test {test_loss:.4} lr {lr_used:.1e}{}",
            train_accuracy
                .map(|a| format!(" acc {a:.3}"))
                .unwrap_or_default()
        );
        on_epoch(&rec);
        epochs.push(rec);
        if cfg.stop_at_perfect_train && train_accuracy == Some(1.0) {
            stop_reason = StopReason::PerfectTrain;
            break;
        }
        if d.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    net.params = best;
    Ok((
        net,
        TrainLog {
            epochs,
            best_epoch: ctl.best_epoch,
            stop_reason,
        },
    ))
}

/// Source of initial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PretrainTask {
    None,
    RotationSelfSupervised { n_rotations: usize, epochs: usize },
    OrganClassification { corpus: PathBuf, epochs: usize },
    ExternalCheckpoint { path: PathBuf },
}

impl PretrainTask {
    pub fn name(&self) -> &'static str {
        match self {
            PretrainTask::None => "none",
            PretrainTask::RotationSelfSupervised { .. } => "rotation",
            PretrainTask::OrganClassification { .. } => "organ",
            PretrainTask::ExternalCheckpoint { .. } => "checkpoint",
        }
    }
}

/// Proper axis-aligned rotations of a cube as `(axis permutation, flips)`,
/// identity first.
pub fn cube_rotations() -> Vec<([usize; 3], [bool; 3])> {
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut out = Vec::new();
    for p in perms {
        let parity = if matches!(p, [0, 1, 2] | [1, 2, 0] | [2, 0, 1]) {
            1
        } else {
            -1
        };
        for bits in 0..8u8 {
            let flips = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
            let sign: i32 = flips.iter().map(|&f| if f { -1 } else { 1 }).product();
            if sign * parity == 1 {
                out.push((p, flips));
            }
        }
    }
    out
}

/// Rotations usable on a `[C, D, H, W]` grid: all 24 for cubes, otherwise
/// those that keep the shape. Truncated to `n`.
pub fn rotation_set(grid: [usize; 3], n: usize) -> Vec<([usize; 3], [bool; 3])> {
    let mut v: Vec<_> = cube_rotations()
        .into_iter()
        .filter(|(p, _)| (0..3).all(|i| grid[p[i]] == grid[i]))
        .collect();
    if n < v.len() {
        let step = v.len() / n;
        v = v.into_iter().step_by(step.max(1)).take(n).collect();
    }
    v
}

pub fn rotate<T: Scalar>(x: &Array4<T>, rot: ([usize; 3], [bool; 3])) -> Array4<T> {
    let (p, flips) = rot;
    let mut y = x.view().permuted_axes([0, p[0] + 1, p[1] + 1, p[2] + 1]);
    for (ax, &f) in flips.iter().enumerate() {
        if f {
            y.invert_axis(Axis(ax + 1));
        }
    }
    y.as_standard_layout().into_owned()
}

/// Train the backbone on an auxiliary `n_classes` problem through a temporary
/// `pretext.*` head. Returns the final training accuracy of that head.
pub fn fit_pretext<T: Scalar>(
    net: &mut Network<T>,
    items: &[(Array4<T>, usize)],
    n_classes: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    let feat = net.backbone.feature_dim();
    net.params.remove_prefix("pretext.");
    net.params
        .declare("pretext.weight", &[n_classes, feat], ParamKind::Weight);
    net.params
        .declare("pretext.bias", &[n_classes], ParamKind::Bias);
    net.params
        .reinitialize_prefix("pretext.", derive_seed(seed, &["pretext-head"]));
    let ones = vec![T::one(); n_classes];
    let mut opt = Adam::new(T::lit(lr), T::zero());
    let clinical_zero =
        (net.clinical_dim > 0).then(|| Array2::<T>::zeros((batch, net.clinical_dim)));
    let pretext_logits =
        |net: &Network<T>, g: &mut Graph<T>, x: ArrayD<T>, mode: Mode| -> Result<_> {
            let n = x.shape()[0];
            let xi = g.input(x, false);
            let ci = clinical_zero
                .as_ref()
                .map(|c| g.input(c.slice(ndarray::s![..n, ..]).to_owned().into_dyn(), false));
            let out = net.forward(g, xi, ci, mode)?;
            let w = g.param(
                "pretext.weight",
                Arc::clone(net.params.get("pretext.weight")),
            );
            let b = g.param("pretext.bias", Arc::clone(net.params.get("pretext.bias")));
            Ok(g.linear(out.embedding, w, Some(b)))
        };
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &["pretext", &epoch.to_string()],
        )));
        for (b, chunk) in order.chunks(batch).enumerate() {
            let x = stack_batch(&chunk.iter().map(|&i| &items[i].0).collect::<Vec<_>>());
            let t: Vec<usize> = chunk.iter().map(|&i| items[i].1).collect();
            let mut g = Graph::new();
            let mode = Mode::Train {
                dropout_seed: derive_seed(
                    seed,
                    &["pretext-dropout", &epoch.to_string(), &b.to_string()],
                ),
            };
            let logits = pretext_logits(net, &mut g, x, mode)?;
            let loss = g.weighted_cross_entropy(logits, &t, &ones);
            let lv = g.value(loss).first().unwrap().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    lr,
                    batch: chunk.iter().map(|i| format!("pretext#{i}")).collect(),
                });
            }
            let grads = g.backward(loss);
            opt.step(&mut net.params, &grads);
            let stats = g.take_batch_stats();
            net.params.apply_batch_stats(&stats, T::lit(0.1));
        }
    }
    let mut correct = 0;
    for chunk in (0..items.len()).collect::<Vec<_>>().chunks(batch) {
        let x = stack_batch(&chunk.iter().map(|&i| &items[i].0).collect::<Vec<_>>());
        let mut g = Graph::new();
        let logits = pretext_logits(net, &mut g, x, Mode::Eval)?;
        for (row, &i) in g.value(logits).rows().into_iter().zip(chunk) {
            correct += usize::from(argmax(row.iter().copied()) == items[i].1);
        }
    }
    net.params.remove_prefix("pretext.");
    Ok(correct as f64 / items.len() as f64)
}

/// Rotated copies of every volume labelled by rotation index.
pub fn rotation_items<T: Scalar>(
    volumes: &[Arc<Array4<T>>],
    n_rotations: usize,
) -> (Vec<(Array4<T>, usize)>, usize) {
    let Some(first) = volumes.first() else {
        return (Vec::new(), 0);
    };
    let s = first.shape();
    let rots = rotation_set([s[1], s[2], s[3]], n_rotations);
    let mut items = Vec::new();
    for v in volumes {
        for (k, &r) in rots.iter().enumerate() {
            items.push((rotate(v, r), k));
        }
    }
    (items, rots.len())
}

/// Labelled organ volumes listed in `<corpus>/labels.csv` (`path,label`),
/// resampled to the model grid and repeated across its channels.
pub fn load_organ_corpus<T: Scalar>(
    corpus: &Path,
    grid: [usize; 3],
    channels: usize,
) -> Result<(Vec<(Array4<T>, usize)>, usize)> {
    let list = corpus.join("labels.csv");
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&list)?;
    let mut items = Vec::new();
    let mut n_classes = 0;
    for row in rdr.records() {
        let row = row?;
        let (path, label) = (row.get(0).unwrap_or(""), row.get(1).unwrap_or(""));
        let label: usize = label.parse().map_err(|_| Error::Metadata {
            path: list.clone(),
            msg: format!("label `{label}`"),
        })?;
        let v = VolumeGrid::<f64>::read_nifti(&corpus.join(path))?;
        let r = crate::preprocess::resize_to(&v.voxels, grid);
        let mean = r.mean().unwrap_or(0.0);
        let std = r.std(0.0).max(1e-8);
        let r = r.mapv(|x| T::lit((x - mean) / std));
        let x = Array4::from_shape_fn((channels, grid[0], grid[1], grid[2]), |(_, i, j, k)| {
            r[[i, j, k]]
        });
        n_classes = n_classes.max(label + 1);
        items.push((x, label));
    }
    Ok((items, n_classes))
}

/// Initialize the backbone per `task` and finish with a fresh 4-class head.
pub fn pretrain<T: Scalar>(
    task: &PretrainTask,
    mut net: Network<T>,
    unlabeled: &[Arc<Array4<T>>],
    seed: u64,
) -> Result<Network<T>> {
    let head_seed = derive_seed(seed, &["head-reset"]);
    match task {
        PretrainTask::None => return Ok(net),
        PretrainTask::RotationSelfSupervised {
            n_rotations,
            epochs,
        } => {
            let (items, k) = rotation_items(unlabeled, *n_rotations);
            if k < 2 {
                return Err(Error::InvalidArgument(
                    "fewer than two usable rotations for this grid".into(),
                ));
            }
            let acc = fit_pretext(&mut net, &items, k, *epochs, 1e-4, 4, seed)?;
            log::info!("rotation pretraining: {k}-way accuracy {acc:.3}");
        }
        PretrainTask::OrganClassification { corpus, epochs } => {
            let (items, k) = load_organ_corpus(corpus, net.spec.spatial, net.spec.channel_count)?;
            let acc = fit_pretext(&mut net, &items, k, *epochs, 1e-4, 4, seed)?;
            log::info!("organ pretraining: {k}-way accuracy {acc:.3}");
        }
        PretrainTask::ExternalCheckpoint { path } => {
            let (_, tensors) = read_checkpoint(path)?;
            load_backbone(&mut net, &tensors, path)?;
        }
    }
    net.reset_head(head_seed);
    Ok(net)
}

//! Acceptance run: one PASS/FAIL/SKIP line per criterion.
//!
//! `cargo test -p rano-cli --test acceptance -- --nocapture` shows the table.
//! Real-data checks read `LUMIERE_CONFIG`, a study TOML pointing at the dataset.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rano_core::cohort::{
    filter_timepoints, index_dataset, pair_consecutive, MetadataSchema, ModalitySet, RanoLabel,
    TimepointRecord,
};
use rano_core::eval::stats::{dunn_posthoc, kruskal_wallis, mann_whitney_u};
use rano_core::eval::{confusion, Averaging, Metrics};
use rano_core::explain::{grad_cam, input_gradient, saliency};
use rano_core::models::{build_model, ArchitectureId, InputSpec, Mode, Network};
use rano_core::runner::synth::{generate, SynthConfig};
use rano_core::runner::{StudyConfig, StudyData};
use rano_core::sampling::{compute_sample_weights, weighted_draw, AugmentationPolicy};
use rano_core::train::{predict_classes, train_fold, Dataset, EpochController, TrainConfig};
use rano_tensor::Graph;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = std::result::Result<String, String>;

enum Outcome {
    Pass,
    Fail,
    Skip,
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(name: &str, bound: Duration, f: impl FnOnce() -> Check) -> Outcome {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f));
    let dt = t0.elapsed();
    let (outcome, detail) = match res {
        Ok(Ok(d)) if dt <= bound => (Outcome::Pass, d),
        Ok(Ok(d)) => (
            Outcome::Fail,
            format!("{d}; took {dt:.1?}, bound {bound:?}"),
        ),
        Ok(Err(e)) => (Outcome::Fail, e),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (Outcome::Fail, format!("panic: {msg}"))
        }
    };
    let tag = match outcome {
        Outcome::Pass => "PASS",
        Outcome::Fail => "FAIL",
        Outcome::Skip => unreachable!(),
    };
    println!("{tag} {name:<28} {dt:>9.2?}  {detail}");
    outcome
}

fn skip(name: &str, why: &str) -> Outcome {
    println!("SKIP {name:<28} {:>9}  {why}", "-");
    Outcome::Skip
}

// ---------------------------------------------------------------- cohort

fn brute_pairs(kept: &[TimepointRecord], mods: &ModalitySet) -> Vec<(String, i64, i64)> {
    let mut out = vec![];
    for a in kept {
        for b in kept {
            if a.patient_id != b.patient_id || a.week >= b.week {
                continue;
            }
            let gap = kept
                .iter()
                .any(|c| c.patient_id == a.patient_id && c.week > a.week && c.week < b.week);
            let has = |r: &TimepointRecord| mods.iter().all(|m| r.available.contains(m));
            if !gap && has(a) && has(b) {
                out.push((a.patient_id.clone(), a.week, b.week));
            }
        }
    }
    out.sort();
    out
}

fn cohort_funnel() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SynthConfig {
        n_patients: 20,
        followups: 6,
        grid: [4; 3],
        ..Default::default()
    };
    let ds = generate(dir.path(), &cfg).map_err(|e| e.to_string())?;
    let idx = index_dataset(&ds.images, &ds.metadata, &MetadataSchema::default())
        .map_err(|e| e.to_string())?;
    ensure(
        idx.records.len() == ds.sessions,
        "record count differs from sessions on disk",
    )?;
    let surg = idx.known_surgery_weeks();
    let kept = filter_timepoints(&idx.records, &surg, 13).kept;
    let oracle_kept: Vec<String> = idx
        .records
        .iter()
        .filter(|r| {
            surg.get(&r.patient_id).is_some_and(|&s| {
                matches!(
                    r.label,
                    RanoLabel::PD | RanoLabel::SD | RanoLabel::PR | RanoLabel::CR
                ) && r.week - s >= 13
                    && !r.available.is_empty()
            })
        })
        .map(|r| r.key())
        .collect();
    ensure(
        kept.iter().map(|r| r.key()).collect::<Vec<_>>() == oracle_kept,
        "filter differs",
    )?;
    let mut counts = vec![];
    for mods in ModalitySet::study_sets() {
        let mut got: Vec<_> = pair_consecutive(&kept, &mods)
            .into_iter()
            .map(|s| (s.patient_id, s.prev.week, s.curr.week))
            .collect();
        got.sort();
        ensure(
            got == brute_pairs(&kept, &mods),
            format!("pairs differ for {mods}"),
        )?;
        counts.push(format!("{}={}", mods.key(), got.len()));
    }
    Ok(format!(
        "{} kept of {}; pairs {}",
        kept.len(),
        idx.records.len(),
        counts.join(" ")
    ))
}

fn real_cohort(config: &Path) -> Check {
    let cfg = StudyConfig::load(config).map_err(|e| e.to_string())?;
    let data = StudyData::open(&cfg).map_err(|e| e.to_string())?;
    let n = data.filtered.kept.len();
    ensure(n == 366, format!("{n} retained timepoints, expected 366"))?;
    Ok("366 retained timepoints".into())
}

// ---------------------------------------------------------------- sampler

fn sampler() -> Check {
    let prev = [0.67, 0.20, 0.06, 0.07];
    let mut samples = vec![];
    let tp = |p: &str, week, label| TimepointRecord {
        patient_id: p.into(),
        week,
        session: format!("week-{week:03}"),
        label,
        available: ModalitySet::all(),
        image_paths: BTreeMap::new(),
    };
    for (c, n) in [67, 20, 6, 7].into_iter().enumerate() {
        for i in 0..n {
            let id = format!("P{c}-{i}");
            let label = RanoLabel::TRAINABLE[c];
            samples.push(rano_core::cohort::StudySample {
                patient_id: id.clone(),
                prev: tp(&id, 20, RanoLabel::SD),
                curr: tp(&id, 30, label),
                modalities: ModalitySet::all(),
                label,
            });
        }
    }
    let w = compute_sample_weights(&samples, prev)
        .map_err(|e| e.to_string())?
        .values();
    for (c, expect) in [0.33, 0.80, 0.94, 0.93].into_iter().enumerate() {
        let got = w[samples.iter().position(|s| s.class_index() == c).unwrap()];
        ensure(
            (got - expect).abs() < 1e-12,
            format!("class {c} weight {got}"),
        )?;
    }
    let n = 100_000;
    let draws = weighted_draw(&w, n, 2).map_err(|e| e.to_string())?;
    let mut obs = [0.0; 4];
    for i in draws {
        obs[samples[i].class_index()] += 1.0;
    }
    let total: f64 = w.iter().sum();
    let mut chi = 0.0;
    for c in 0..4 {
        let e: f64 = samples
            .iter()
            .zip(&w)
            .filter(|(s, _)| s.class_index() == c)
            .map(|(_, wi)| wi / total * n as f64)
            .sum();
        chi += (obs[c] - e).powi(2) / e;
    }
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi);
    ensure(p > 0.01, format!("chi-square {chi:.3}, p {p:.4}"))?;
    Ok(format!("weights exact; chi-square {chi:.3} p {p:.3}"))
}

// ---------------------------------------------------------------- metrics

fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let n = rng.random_range(1..80);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let m = Metrics::from_confusion(&confusion(&preds, &truth).unwrap(), Averaging::Prevalence)
            .map_err(|e| e.to_string())?;
        let (mut ba, mut k, mut r, mut p) = (0.0, 0.0, 0.0, 0.0);
        for c in 0..4 {
            let (mut sup, mut tp, mut pc) = (0.0, 0.0, 0.0);
            for i in 0..n {
                sup += f64::from(truth[i] == c);
                tp += f64::from(truth[i] == c && preds[i] == c);
                pc += f64::from(preds[i] == c);
            }
            if sup > 0.0 {
                k += 1.0;
                ba += tp / sup;
                r += tp / sup * sup / n as f64;
                p += if pc > 0.0 { tp / pc } else { 0.0 } * sup / n as f64;
            }
        }
        let f1 = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        let diffs = [
            m.balanced_accuracy - ba / k,
            m.recall - r,
            m.precision - p,
            m.f1 - f1,
        ];
        ensure(
            diffs.iter().all(|d| d.abs() < 1e-12),
            format!("trial {trial}: {diffs:?}"),
        )?;
    }
    let truth: Vec<usize> = (0..20).map(|i| i % 4).collect();
    let diag = Metrics::from_confusion(&confusion(&truth, &truth).unwrap(), Averaging::Prevalence)
        .unwrap();
    ensure(
        [diag.balanced_accuracy, diag.recall, diag.precision, diag.f1] == [1.0; 4],
        "diagonal not all ones",
    )?;
    let pd = Metrics::from_confusion(&confusion(&[0; 20], &truth).unwrap(), Averaging::Prevalence)
        .unwrap();
    ensure(
        (pd.balanced_accuracy - 0.25).abs() < 1e-15,
        "always-PD not 0.25",
    )?;
    Ok("1000 matrices within 1e-12; diagonal 1; always-PD 0.25".into())
}

// ---------------------------------------------------------------- stats

fn statistics() -> Check {
    let mw = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).map_err(|e| e.to_string())?;
    // 2 extreme splits out of C(6,3) = 20.
    ensure(
        mw.exact && (mw.p_value - 2.0 / 20.0).abs() < 1e-12,
        format!("MW p {}", mw.p_value),
    )?;
    let kw = kruskal_wallis(&vec![vec![1.0, 2.0, 3.0]; 3]).map_err(|e| e.to_string())?;
    ensure(kw.statistic.abs() < 1e-12, format!("KW H {}", kw.statistic))?;
    let dunn = dunn_posthoc(&[vec![1.0, 2.0], vec![1.1, 2.1], vec![0.9, 2.2]]).unwrap();
    ensure(dunn.iter().all(|r| r.p_value <= 1.0), "Dunn p above 1")?;
    ensure(dunn.iter().any(|r| r.p_value == 1.0), "Dunn p not clamped")?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let k = rng.random_range(2..5);
        let g: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..rng.random_range(2..6))
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect()
            })
            .collect();
        let e: Vec<Vec<f64>> = g
            .iter()
            .map(|v| v.iter().map(|x| x.exp()).collect())
            .collect();
        let (a, b) = (kruskal_wallis(&g).unwrap(), kruskal_wallis(&e).unwrap());
        ensure(
            (a.p_value - b.p_value).abs() < 1e-12,
            "KW not rank invariant",
        )?;
        let (a, b) = (
            mann_whitney_u(&g[0], &g[1]).unwrap(),
            mann_whitney_u(&e[0], &e[1]).unwrap(),
        );
        ensure(a.p_value == b.p_value, "MW not rank invariant")?;
        for (x, y) in dunn_posthoc(&g)
            .unwrap()
            .iter()
            .zip(dunn_posthoc(&e).unwrap())
        {
            ensure(
                (x.p_value - y.p_value).abs() < 1e-12,
                "Dunn not rank invariant",
            )?;
        }
    }
    Ok("MW p 0.1; KW H 0; Dunn clamps; 100 exp-transformed sets invariant".into())
}

// ---------------------------------------------------------------- training

fn toy_cohort(n: usize, seed: u64) -> Dataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let (mut ids, mut inputs, mut labels) = (vec![], vec![], vec![]);
    for i in 0..n {
        let label = i % 2;
        let o = [(); 3].map(|_| rng.random_range(1..4));
        let x = Array4::from_shape_fn((2, 8, 8, 8), |(c, a, b, d)| {
            let inside = c == 1 && (0..3).all(|k| (o[k]..o[k] + 4).contains(&[a, b, d][k]));
            let v = if inside && label == 0 { 2.0 } else { 0.0 };
            v + noise.sample(&mut rng) as f32
        });
        ids.push(format!("toy{seed}-{i}"));
        inputs.push(Arc::new(x));
        labels.push(label);
    }
    Dataset {
        ids,
        inputs,
        labels,
        clinical: None,
    }
}

fn training() -> Check {
    let test = [
        1.0, 0.8, 0.6, 0.7, 0.65, 0.9, 0.61, 0.6, 0.62, 0.8, 0.7, 0.75, 0.66, 0.1,
    ];
    let mut c = EpochController::new(1e-4, 10.0, 10);
    let mut stop = None;
    for (e, &t) in test.iter().enumerate() {
        if c.observe(1.0 / (e + 1) as f64, t).stop {
            stop = Some(e);
            break;
        }
    }
    ensure(
        stop == Some(12) && c.best_epoch == 2,
        format!("stop {stop:?} best {}", c.best_epoch),
    )?;
    let mut c = EpochController::new(1e-4, 10.0, 100);
    let mut lr = vec![];
    for tl in [1.0, 1.0, 1.1, 0.9, 0.9, 0.5] {
        lr.push(c.observe(tl, 1.0).lr);
    }
    let expect = [1e-4, 1e-5, 1e-6, 1e-6, 1e-7, 1e-7];
    ensure(
        lr.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-18),
        format!("lr {lr:?}"),
    )?;

    let train = toy_cohort(40, 1);
    let held = toy_cohort(10, 2);
    let spec = InputSpec::new("CT1".parse().unwrap(), false, false, [8; 3]);
    let net =
        build_model::<f32>(ArchitectureId::Densenet121, &spec, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 50,
        patience: 50,
        seed: 3,
        augmentation: AugmentationPolicy::none(),
        track_train_accuracy: true,
        stop_at_perfect_train: true,
        ..Default::default()
    };
    let (_, log) = train_fold(net, &train, &held, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    let best = log
        .epochs
        .iter()
        .filter_map(|e| e.train_accuracy)
        .fold(0.0, f64::max);
    ensure(
        best == 1.0,
        format!("best train accuracy {best} in {} epochs", log.epochs.len()),
    )?;
    Ok(format!(
        "stop at 10 flat epochs; lr decades; toy 100% train in {} epochs",
        log.epochs.len()
    ))
}

// ---------------------------------------------------------------- models

fn fd_check(net: &Network<f64>, x: &ArrayD<f64>) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = Array2::from_shape_simple_fn((1, 4), || rng.random_range(-1.0..1.0));
    let obj = |x: &ArrayD<f64>| (&net.predict(x.clone(), None).unwrap().logits * &r).sum();
    let mut g = Graph::new();
    let xi = g.input(x.clone(), true);
    let out = net
        .forward(&mut g, xi, None, Mode::Eval)
        .map_err(|e| e.to_string())?;
    let grads = g.backward_from(out.logits, r.clone().into_dyn());
    let gx = grads.get(xi).ok_or("no input gradient")?;
    let gmax = gx.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let h = 1e-5;
    for _ in 0..5 {
        let idx: Vec<usize> = x.shape().iter().map(|&d| rng.random_range(0..d)).collect();
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[IxDyn(&idx)] += h;
        xm[IxDyn(&idx)] -= h;
        let num = (obj(&xp) - obj(&xm)) / (2.0 * h);
        let ana = gx[IxDyn(&idx)];
        ensure(
            (ana - num).abs() <= 1e-2 * num.abs().max(1e-3 * gmax),
            format!("{}: analytic {ana} numeric {num}", net.arch),
        )?;
    }
    Ok(())
}

fn models() -> Check {
    let mut specs = 0;
    for set in ModalitySet::study_sets() {
        for sub in [false, true] {
            let s = InputSpec::new(set.clone(), sub, false, [8; 3]);
            for arch in ArchitectureId::ALL {
                let net = build_model::<f32>(arch, &s, 1).map_err(|e| e.to_string())?;
                let out = net
                    .predict(ArrayD::zeros(IxDyn(&[1, s.channel_count, 8, 8, 8])), None)
                    .map_err(|e| format!("{arch} {set} sub={sub}: {e}"))?;
                ensure(
                    out.logits.shape() == [1, 4],
                    format!("{arch} logits {:?}", out.logits.shape()),
                )?;
                specs += 1;
            }
        }
    }
    let s = InputSpec::new("T2W".parse().unwrap(), false, false, [16; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = ArrayD::from_shape_simple_fn(IxDyn(&[1, s.channel_count, 16, 16, 16]), || {
        rng.random_range(-1.0..1.0)
    });
    for arch in ArchitectureId::ALL {
        let net = build_model::<f64>(arch, &s, 7).map_err(|e| e.to_string())?;
        fd_check(&net, &x)?;
        let a = build_model::<f32>(arch, &s, 42)
            .unwrap()
            .params
            .fingerprint();
        let b = build_model::<f32>(arch, &s, 42)
            .unwrap()
            .params
            .fingerprint();
        ensure(a == b, format!("{arch} init not deterministic"))?;
    }
    Ok(format!(
        "{specs} arch/spec combinations emit 4 logits; gradients within 1e-2; seeded init equal"
    ))
}

// ---------------------------------------------------------------- explain

const G: usize = 16;
const BLOB: usize = 5;

fn blob_cohort(n: usize, seed: u64) -> (Dataset<f32>, Vec<Option<[usize; 3]>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let (mut ids, mut inputs, mut labels, mut corners) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let label = i % 2;
        let o = [(); 3].map(|_| rng.random_range(2..=G - BLOB - 2));
        let x = Array4::from_shape_fn((2, G, G, G), |(c, a, b, d)| {
            let inside = (0..3).all(|k| (o[k]..o[k] + BLOB).contains(&[a, b, d][k]));
            let v = if c == 1 && inside && label == 0 {
                2.0
            } else {
                0.0
            };
            v + noise.sample(&mut rng) as f32
        });
        ids.push(format!("blob{seed}-{i}"));
        inputs.push(Arc::new(x));
        labels.push(label);
        corners.push((label == 0).then_some(o));
    }
    (
        Dataset {
            ids,
            inputs,
            labels,
            clinical: None,
        },
        corners,
    )
}

fn near_blob(o: [usize; 3], v: [usize; 3], r: usize) -> bool {
    (0..3).all(|k| v[k] + r >= o[k] && v[k] < o[k] + BLOB + r)
}

fn explainability() -> Check {
    let (train, _) = blob_cohort(40, 11);
    let (held, _) = blob_cohort(10, 12);
    let spec = InputSpec::new("CT1".parse().unwrap(), false, false, [G; 3]);
    let net =
        build_model::<f32>(ArchitectureId::Densenet121, &spec, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 40,
        patience: 40,
        seed: 5,
        augmentation: AugmentationPolicy::none(),
        track_train_accuracy: true,
        stop_at_perfect_train: true,
        ..Default::default()
    };
    let (net, _) = train_fold(net, &train, &held, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    ensure(
        predict_classes(&net, &held, 8).unwrap() == held.labels,
        "blob detector misclassifies",
    )?;

    let (probe, corners) = blob_cohort(8, 99);
    let (mut cam_min, mut ratio_min) = (f64::INFINITY, f64::INFINITY);
    for (x, o) in probe.inputs.iter().zip(&corners) {
        let Some(o) = *o else { continue };
        let cam = grad_cam(&net, x, None, 0, Some("conv0")).map_err(|e| e.to_string())?;
        let mut vox: Vec<([usize; 3], f64)> = cam
            .values
            .indexed_iter()
            .map(|((a, b, c), &v)| ([a, b, c], v))
            .collect();
        vox.sort_by(|a, b| b.1.total_cmp(&a.1));
        let top = &vox[..(vox.len() as f64 * 0.05).ceil() as usize];
        let mass: f64 = top.iter().map(|t| t.1).sum();
        let inside: f64 = top
            .iter()
            .filter(|t| near_blob(o, t.0, 2))
            .map(|t| t.1)
            .sum();
        cam_min = cam_min.min(inside / mass);

        let sal = saliency(&net, x, None, 0, false).map_err(|e| e.to_string())?;
        let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
        for ((a, b, c), &v) in sal[1].values.indexed_iter() {
            if near_blob(o, [a, b, c], 0) {
                si += v;
                ni += 1.0;
            } else {
                so += v;
                no += 1.0;
            }
        }
        ratio_min = ratio_min.min((si / ni) / (so / no));
    }
    ensure(
        cam_min >= 0.5,
        format!("Grad-CAM top-5% mass in blob {cam_min:.3}"),
    )?;
    ensure(
        ratio_min >= 2.0,
        format!("saliency blob/background {ratio_min:.2}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2 * 3 * 4 * 5;
    let w = Arc::new(ArrayD::from_shape_simple_fn(IxDyn(&[4, n]), || {
        rng.random_range(-1.0..1.0f64)
    }));
    let x = Array4::from_shape_simple_fn((2, 3, 4, 5), || rng.random_range(-2.0..2.0f64));
    for t in 0..4 {
        let g = input_gradient(&x, t, &|g, xi| {
            let flat = g.reshape(xi, &[1, n]);
            let wn = g.param("w", w.clone());
            Ok(g.linear(flat, wn, None))
        })
        .map_err(|e| e.to_string())?;
        let got: Vec<f64> = g.iter().map(|v| v.abs()).collect();
        let expect: Vec<f64> = w.index_axis(Axis(0), t).iter().map(|v| v.abs()).collect();
        ensure(got == expect, "linear saliency differs from |w|")?;
    }
    Ok(format!(
        "min Grad-CAM mass in blob {cam_min:.2}; min saliency ratio {ratio_min:.1}; linear exact"
    ))
}

// ---------------------------------------------------------------- end to end

fn rano(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rano"))
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .output()
        .expect("spawn rano")
}

fn records(study: &Path) -> BTreeMap<String, serde_json::Value> {
    let text = fs::read_to_string(study.join("records.jsonl")).unwrap_or_default();
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            let key = format!("{}/{}/{}", v["axis"], v["option"], v["fold"]);
            (key, v)
        })
        .collect()
}

fn line_count(p: &Path) -> usize {
    fs::read_to_string(p)
        .map(|t| t.lines().count())
        .unwrap_or(0)
}

fn without_wall_time(jsonl: &str) -> String {
    jsonl
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_ms");
            }
            v.to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// File contents under `dir`, with wall times stripped from JSON-lines logs.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let mut bytes = fs::read(&p).unwrap();
                if p.to_string_lossy().ends_with(".jsonl") {
                    bytes = without_wall_time(&String::from_utf8_lossy(&bytes)).into_bytes();
                }
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("ref"), tmp.path().join("resumed"));
    for d in [&a, &b] {
        let o = rano(&["synth", d.to_str().unwrap()]);
        ensure(
            o.status.success(),
            String::from_utf8_lossy(&o.stderr).to_string(),
        )?;
    }
    let cfg = |d: &Path| d.join("study.toml").to_string_lossy().to_string();
    let study = |d: &Path| d.join("runs/study");

    let o = rano(&["ablate", "-c", &cfg(&a), "--quiet"]);
    ensure(
        o.status.success(),
        format!("reference run: {}", String::from_utf8_lossy(&o.stderr)),
    )?;

    // Graceful stop, then a hard kill in the middle of training, then resume.
    let o = rano(&["ablate", "-c", &cfg(&b), "--quiet", "--stop-after", "3"]);
    ensure(
        o.status.code() == Some(3),
        format!("stop-after exit {:?}", o.status.code()),
    )?;
    ensure(
        line_count(&study(&b).join("records.jsonl")) == 3,
        "stop-after did not persist 3 records",
    )?;
    let mut child = Command::new(env!("CARGO_BIN_EXE_rano"))
        .args(["ablate", "-c", &cfg(&b), "--quiet"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(600);
    while line_count(&study(&b).join("records.jsonl")) < 7 && Instant::now() < deadline {
        if child.try_wait().map_err(|e| e.to_string())?.is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    std::thread::sleep(Duration::from_millis(700));
    let _ = child.kill();
    let _ = child.wait();
    let killed_at = line_count(&study(&b).join("records.jsonl"));
    let o = rano(&["ablate", "-c", &cfg(&b), "--quiet"]);
    ensure(
        o.status.success(),
        format!("resume: {}", String::from_utf8_lossy(&o.stderr)),
    )?;

    let (ra, rb) = (records(&study(&a)), records(&study(&b)));
    ensure(
        !ra.is_empty() && ra.values().all(|r| r["error"].is_null()),
        "incomplete records",
    )?;
    ensure(ra == rb, "records differ after kill and resume")?;
    for f in ["summary.json", "axes.json"] {
        ensure(
            fs::read(study(&a).join(f)).ok() == fs::read(study(&b).join(f)).ok(),
            format!("{f} differs"),
        )?;
    }
    let (ca, cb) = (
        tree(&study(&a).join("checkpoints")),
        tree(&study(&b).join("checkpoints")),
    );
    let differing: Vec<_> = ca
        .keys()
        .chain(cb.keys())
        .filter(|k| ca.get(*k) != cb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    ensure(
        !ca.is_empty() && differing.is_empty(),
        format!("checkpoints differ: {differing:?}"),
    )?;

    let o = rano(&["report", study(&b).to_str().unwrap()]);
    ensure(o.status.success(), "report failed")?;
    let rep = study(&b).join("report");
    for axis in [
        "subtraction",
        "modalities",
        "architecture",
        "pretraining",
        "clinical",
    ] {
        let svg = fs::read_to_string(rep.join(format!("boxplot_{axis}.svg")))
            .map_err(|e| format!("boxplot_{axis}.svg: {e}"))?;
        ensure(
            svg.starts_with("<svg") && svg.contains("Balanced Accuracy"),
            format!("{axis} plot"),
        )?;
    }
    let table = fs::read_to_string(rep.join("significance.md")).map_err(|e| e.to_string())?;
    ensure(
        table.contains(
            "| Axis | Test | Groups | Balanced Accuracy | F1-score | Precision | Recall |",
        ),
        "p-value table header",
    )?;
    ensure(
        rep.join("significance.csv").exists() && rep.join("summary.md").exists(),
        "report files",
    )?;
    Ok(format!(
        "{} records; killed after {killed_at}; resumed outputs identical; 5 plots and p-table",
        rb.len()
    ))
}

fn full_reproduction(config: &str) -> Check {
    let mut bas = vec![];
    for fold in 0..5 {
        let f = fold.to_string();
        let o = rano(&[
            "train",
            "-c",
            config,
            "--fold",
            &f,
            "--subtraction",
            "false",
            "--modalities",
            "T1W+T2W+FLAIR",
            "--architecture",
            "densenet264",
            "--pretraining",
            "none",
            "--clinical",
            "false",
        ]);
        ensure(
            o.status.success(),
            String::from_utf8_lossy(&o.stderr).to_string(),
        )?;
        let out = String::from_utf8_lossy(&o.stdout);
        let ba: f64 = out
            .split("balanced accuracy ")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .ok_or("no balanced accuracy in train output")?;
        bas.push(ba);
    }
    let med = rano_core::eval::median(&bas);
    ensure(
        (med - 0.5096).abs() <= 0.05,
        format!("median balanced accuracy {med:.4}"),
    )?;
    Ok(format!("median balanced accuracy {med:.4} over {bas:?}"))
}

#[test]
fn acceptance() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let secs = Duration::from_secs;
    let lumiere = std::env::var("LUMIERE_CONFIG").ok();
    let mut outcomes = vec![
        run("cohort funnel", secs(5), cohort_funnel),
        match &lumiere {
            Some(c) => run("cohort funnel (real data)", secs(600), || {
                real_cohort(Path::new(c))
            }),
            None => skip("cohort funnel (real data)", "LUMIERE_CONFIG not set"),
        },
        run("sampler", secs(10), sampler),
        run("metrics oracle", secs(5), metrics_oracle),
        run("statistics", secs(10), statistics),
        run("training protocol", min(10), training),
        run("model contracts", min(5), models),
        run("explainability", min(10), explainability),
        run("end-to-end smoke", min(30), end_to_end),
    ];
    outcomes.push(match &lumiere {
        Some(c) if std::env::var("RANO_FULL_REPRO").is_ok() => {
            run("full reproduction", Duration::MAX, || full_reproduction(c))
        }
        _ => skip(
            "full reproduction",
            "needs LUMIERE_CONFIG and RANO_FULL_REPRO",
        ),
    });
    let failed = outcomes
        .iter()
        .filter(|o| matches!(o, Outcome::Fail))
        .count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rano_core::explain::{
    dice, grad_cam, input_gradient, render_overlay, saliency, top_decile_dice, top_fraction_mask,
    AttributionMethod, AttributionVolume, Normalization, TargetSource,
};
use rano_core::models::{build_model, build_model_with, ArchitectureId, InputSpec, ModelOptions};
use rano_core::sampling::AugmentationPolicy;
use rano_core::train::{predict_classes, train_fold, Dataset, TrainConfig};
use rano_core::{Error, VolumeGrid};

const GRID: usize = 16;
const BLOB: usize = 5;

fn spec() -> InputSpec {
    InputSpec::new("CT1".parse().unwrap(), false, false, [GRID; 3])
}

/// Class 0 samples carry a bright 5³ cube in the current-timepoint channel.
fn blob_cohort(n: usize, seed: u64) -> (Dataset<f32>, Vec<Option<[usize; 3]>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let (mut ids, mut inputs, mut labels, mut corners) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let label = i % 2;
        let o = [(); 3].map(|_| rng.random_range(2..=GRID - BLOB - 2));
        let x = Array4::from_shape_fn((2, GRID, GRID, GRID), |(c, a, b, d)| {
            let inside = (0..3).all(|k| (o[k]..o[k] + BLOB).contains(&[a, b, d][k]));
            let base = if c == 1 && inside && label == 0 {
                2.0
            } else {
                0.0
            };
            base + noise.sample(&mut rng) as f32
        });
        ids.push(format!("blob{seed}_{i}"));
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

fn in_dilated_blob(o: [usize; 3], v: [usize; 3], r: usize) -> bool {
    (0..3).all(|k| v[k] + r >= o[k] && v[k] < o[k] + BLOB + r)
}

/// Fraction of the top-5% attribution mass inside the blob dilated by 2 voxels.
fn top5_mass_in_blob(values: &Array3<f64>, o: [usize; 3]) -> f64 {
    let mut vox: Vec<([usize; 3], f64)> = values
        .indexed_iter()
        .map(|((a, b, c), &v)| ([a, b, c], v))
        .collect();
    vox.sort_by(|a, b| b.1.total_cmp(&a.1));
    let k = (vox.len() as f64 * 0.05).ceil() as usize;
    let top = &vox[..k];
    let total: f64 = top.iter().map(|t| t.1).sum();
    let inside: f64 = top
        .iter()
        .filter(|t| in_dilated_blob(o, t.0, 2))
        .map(|t| t.1)
        .sum();
    inside / total
}

#[test]
fn planted_blob_is_localized_by_gradcam_and_saliency() {
    let t0 = Instant::now();
    let (train, _) = blob_cohort(40, 11);
    let (test, _) = blob_cohort(10, 12);
    let net = build_model::<f32>(ArchitectureId::Densenet121, &spec(), 0).unwrap();
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
    let (final_net, log) = train_fold(net, &train, &test, &cfg, &mut |_| {}).unwrap();
    let acc = log.epochs.last().unwrap().train_accuracy.unwrap();
    println!(
        "trained {} epochs, train acc {acc}, {:?}",
        log.epochs.len(),
        t0.elapsed()
    );
    assert_eq!(acc, 1.0);
    let pred = predict_classes(&final_net, &test, 8).unwrap();
    assert_eq!(pred, test.labels);

    let (probe, corners) = blob_cohort(8, 99);
    let before = final_net.params.fingerprint();
    let (mut cam_fracs, mut ratios) = (vec![], vec![]);
    for (x, o) in probe.inputs.iter().zip(&corners) {
        let Some(o) = *o else { continue };
        let cam = grad_cam(&final_net, x, None, 0, Some("conv0")).unwrap();
        assert_eq!(cam.shape(), [GRID; 3]);
        assert!(cam.values.iter().all(|&v| v >= 0.0));
        cam_fracs.push(top5_mass_in_blob(&cam.values, o));

        let sal = saliency(&final_net, x, None, 0, false).unwrap();
        let s = &sal[1].values;
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0usize, 0.0, 0usize);
        for ((a, b, c), &v) in s.indexed_iter() {
            if in_dilated_blob(o, [a, b, c], 0) {
                inside += v;
                ni += 1;
            } else {
                outside += v;
                no += 1;
            }
        }
        ratios.push((inside / ni as f64) / (outside / no as f64));
    }
    assert_eq!(final_net.params.fingerprint(), before);
    println!("cam top-5% mass in blob {cam_fracs:?}");
    println!("saliency blob/background {ratios:?}");
    println!("elapsed {:?}", t0.elapsed());
    assert!(!cam_fracs.is_empty());
    assert!(cam_fracs.iter().all(|&f| f >= 0.5), "{cam_fracs:?}");
    assert!(ratios.iter().all(|&r| r >= 2.0), "{ratios:?}");
}

#[test]
fn linear_model_saliency_is_abs_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = (2, 4, 5, 3);
    let n = 2 * 4 * 5 * 3;
    let w = Arc::new(ArrayD::from_shape_simple_fn(IxDyn(&[4, n]), || {
        rng.random_range(-1.0..1.0f64)
    }));
    let b = Arc::new(ArrayD::from_shape_simple_fn(IxDyn(&[4]), || {
        rng.random_range(-1.0..1.0f64)
    }));
    let x = Array4::from_shape_simple_fn(shape, || rng.random_range(-3.0..3.0f64));
    for target in 0..4 {
        let g = input_gradient(&x, target, &|g, xi| {
            let flat = g.reshape(xi, &[1, n]);
            let wn = g.param("w", w.clone());
            let bn = g.param("b", b.clone());
            Ok(g.linear(flat, wn, Some(bn)))
        })
        .unwrap();
        let expect = w.index_axis(Axis(0), target).mapv(f64::abs);
        let got = g.mapv(f64::abs).into_shape_with_order(n).unwrap();
        assert_eq!(got, expect.into_dimensionality().unwrap());
    }
}

#[test]
fn zeroed_head_gives_zero_gradcam() {
    let mut net = build_model::<f64>(ArchitectureId::Densenet121, &spec(), 1).unwrap();
    let shape = net.params.get("head.weight").shape().to_vec();
    net.params.set("head.weight", ArrayD::zeros(IxDyn(&shape)));
    let x = Array4::from_shape_fn((2, GRID, GRID, GRID), |(c, i, j, k)| {
        ((c + i * j + k) % 7) as f64
    });
    for layer in ["conv0", "block1", "block2"] {
        let cam = grad_cam(&net, &x, None, 2, Some(layer)).unwrap();
        assert!(cam.values.iter().all(|&v| v == 0.0), "{layer}");
    }
    assert!(saliency(&net, &x, None, 2, false)
        .unwrap()
        .iter()
        .all(|m| m.values.iter().all(|&v| v == 0.0)));
}

#[test]
fn gradcam_shape_matches_input_for_every_architecture() {
    let x = Array4::from_shape_fn((2, GRID, GRID, GRID), |(c, i, j, k)| {
        (((c + 1) * i + j * k) % 5) as f32 * 0.3
    });
    let opts = ModelOptions { vit_patch: 8 };
    for arch in ArchitectureId::ALL {
        let net = build_model_with::<f32>(arch, &spec(), 2, opts.clone()).unwrap();
        let cam = grad_cam(&net, &x, None, 1, None).unwrap();
        assert_eq!(cam.shape(), [GRID; 3], "{arch}");
        assert_eq!(cam.method, AttributionMethod::GradCam);
        assert!(cam.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        let mm = cam.minmax();
        assert!(mm.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn non_spatial_layer_is_rejected_with_valid_list() {
    let net = build_model::<f32>(ArchitectureId::Densenet121, &spec(), 0).unwrap();
    let x = Array4::zeros((2, GRID, GRID, GRID));
    for layer in ["block3", "pooled", "nope"] {
        match grad_cam(&net, &x, None, 0, Some(layer)) {
            Err(Error::NonSpatialLayer { layer: l, valid }) => {
                assert_eq!(l, layer);
                assert_eq!(valid, vec!["conv0", "block1", "block2"]);
            }
            other => panic!("{layer}: {other:?}"),
        }
    }
}

#[test]
fn signed_saliency_matches_central_differences() {
    let net = build_model::<f64>(ArchitectureId::Densenet121, &spec(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array4::from_shape_simple_fn((2, GRID, GRID, GRID), || rng.random_range(-1.0..1.0f64));
    let target = 3;
    let sal = saliency(&net, &x, None, target, true).unwrap();
    let logit = |x: &Array4<f64>| {
        net.predict(x.clone().insert_axis(Axis(0)).into_dyn(), None)
            .unwrap()
            .logits[[0, target]]
    };
    let gmax = sal
        .iter()
        .flat_map(|m| m.values.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-5;
    for _ in 0..10 {
        let (c, i, j, k) = (
            rng.random_range(0..2),
            rng.random_range(0..GRID),
            rng.random_range(0..GRID),
            rng.random_range(0..GRID),
        );
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[[c, i, j, k]] += h;
        xm[[c, i, j, k]] -= h;
        let num = (logit(&xp) - logit(&xm)) / (2.0 * h);
        let ana = sal[c].values[[i, j, k]];
        assert!(
            (ana - num).abs() <= 1e-2 * num.abs().max(1e-3 * gmax),
            "{ana} vs {num}"
        );
    }
}

#[test]
fn saliency_ignores_constant_logit_shift_and_keeps_weights() {
    let mut net = build_model::<f64>(ArchitectureId::AlexNet3D, &spec(), 4).unwrap();
    let x = Array4::from_shape_fn((2, GRID, GRID, GRID), |(c, i, j, k)| {
        ((c * 3 + i + 2 * j + k) % 9) as f64 / 9.0
    });
    let hash = net.params.fingerprint();
    let a = saliency(&net, &x, None, 1, false).unwrap();
    assert_eq!(net.params.fingerprint(), hash);
    let b = net.params.get("head.bias").mapv(|v| v + 5.0);
    net.params.set("head.bias", b);
    let c = saliency(&net, &x, None, 1, false).unwrap();
    assert_eq!(a, c);
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].source, spec().channel_names()[0]);
}

#[test]
fn dice_and_top_fraction_masks() {
    let a = Array3::from_shape_fn((2, 2, 5), |(i, j, k)| (i * 10 + j * 5 + k) as f64);
    let m = top_fraction_mask(&a, 0.1);
    assert_eq!(m.iter().filter(|&&v| v).count(), 2);
    assert!(m[[1, 1, 4]] && m[[1, 1, 3]]);
    let b = a.mapv(|v| -v);
    let mb = top_fraction_mask(&b, 0.1);
    assert_eq!(dice(&m, &mb), 0.0);
    assert_eq!(dice(&m, &m), 1.0);
    let flat = Array3::<f64>::zeros((2, 2, 5));
    assert!(top_fraction_mask(&flat, 0.1).iter().all(|&v| !v));
    let mut half = m.clone();
    half[[1, 1, 3]] = false;
    // |A∩B| = 1, |A| = 2, |B| = 1.
    assert!((dice(&m, &half) - 2.0 / 3.0).abs() < 1e-15);
    let vol = |v: Array3<f64>| AttributionVolume {
        values: v,
        method: AttributionMethod::Saliency,
        target_class: 0,
        target_source: TargetSource::Explicit,
        normalization: Normalization::Raw,
        source: "x".into(),
    };
    assert_eq!(
        top_decile_dice(&vol(a.clone()), &vol(a.mapv(|v| 2.0 * v + 1.0))),
        1.0
    );
}

#[test]
fn overlay_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let reference = VolumeGrid::from_array(Array3::from_shape_fn((12, 10, 8), |(i, j, k)| {
        (i + j + k) as f32
    }));
    let attr = AttributionVolume {
        values: Array3::from_shape_fn(
            (12, 10, 8),
            |(i, j, _)| if i > 5 && j > 4 { 1.0 } else { 0.0 },
        ),
        method: AttributionMethod::GradCam,
        target_class: 0,
        target_source: TargetSource::Predicted,
        normalization: Normalization::MinMax,
        source: "block1".into(),
    };
    let probs = [0.7, 0.2, 0.05, 0.05];
    let slices = rano_core::explain::even_slices(12, 3);
    assert_eq!(slices, vec![3, 6, 9]);
    let p = dir.path().join("overlay.png");
    render_overlay(&reference, &attr, &slices, &probs, &p).unwrap();
    assert!(std::fs::metadata(&p).unwrap().len() > 0);
    let img = image::open(&p).unwrap().to_rgb8();
    assert!(img.width() > 3 * 8 * 10);

    let zero = AttributionVolume {
        values: Array3::zeros((12, 10, 8)),
        ..attr.clone()
    };
    let pz = dir.path().join("zero.png");
    render_overlay(&reference, &zero, &slices, &probs, &pz).unwrap();
    let img = image::open(&pz).unwrap().to_rgb8();
    // Bottom-right voxel of the first panel: plain grayscale.
    let px = img.get_pixel(10 * 16 - 1, 4 + 8 * 16 - 1);
    assert_eq!(px[0], px[1]);
    assert_eq!(px[1], px[2]);
    assert!(px[0] > 0);

    assert!(render_overlay(
        &reference,
        &attr,
        &[12],
        &probs,
        &dir.path().join("bad.png")
    )
    .is_err());
    let wrong = AttributionVolume {
        values: Array3::zeros((4, 4, 4)),
        ..attr
    };
    assert!(render_overlay(
        &reference,
        &wrong,
        &[1],
        &probs,
        &dir.path().join("bad2.png")
    )
    .is_err());
}

#[test]
fn attribution_round_trips_through_nifti() {
    let dir = tempfile::tempdir().unwrap();
    let reference = VolumeGrid::from_array(Array3::<f32>::zeros((6, 5, 4)));
    let values = Array3::from_shape_fn((6, 5, 4), |(i, j, k)| (i * 20 + j * 4 + k) as f64 * 0.5);
    let attr = AttributionVolume {
        values: values.clone(),
        method: AttributionMethod::Saliency,
        target_class: 1,
        target_source: TargetSource::GroundTruth,
        normalization: Normalization::Raw,
        source: "CT1".into(),
    };
    let p = dir.path().join("sal.nii.gz");
    attr.write_nifti(&reference, &p).unwrap();
    let back = VolumeGrid::<f32>::read_nifti(&p).unwrap();
    assert_eq!(back.voxels.mapv(|v| v as f64), values);
}

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rano_core::cohort::{Modality, ModalitySet};
use rano_core::models::checkpoint::{
    load_backbone, load_checkpoint, read_checkpoint, save_checkpoint,
};
use rano_core::models::{build_model, fuse_clinical, ArchitectureId, InputSpec, Mode, Network};
use rano_tensor::Graph;

fn random_input(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

fn spec(mods: &str, sub: bool, grid: usize) -> InputSpec {
    InputSpec::new(mods.parse().unwrap(), sub, false, [grid; 3])
}

#[test]
fn every_architecture_accepts_the_study_grid() {
    for arch in ArchitectureId::ALL {
        for set in ModalitySet::study_sets() {
            for sub in [false, true] {
                let s = InputSpec::new(set.clone(), sub, false, [8; 3]);
                let c = s.channel_count;
                let net = build_model::<f32>(arch, &s, 1).unwrap();
                let out = net
                    .predict(ArrayD::zeros(IxDyn(&[2, c, 8, 8, 8])), None)
                    .unwrap();
                assert_eq!(out.logits.shape(), &[2, 4], "{arch} with {c} channels");
                for row in out.probabilities.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn densenet264_batch_of_four() {
    let net = build_model::<f32>(
        ArchitectureId::Densenet264,
        &spec("T1W+T2W+FLAIR", false, 16),
        0,
    )
    .unwrap();
    let out = net
        .predict(
            random_input(&[4, 6, 16, 16, 16], 3).mapv(|v| v as f32),
            None,
        )
        .unwrap();
    assert_eq!(out.logits.shape(), &[4, 4]);
}

#[test]
fn parameter_counts_grow_with_depth() {
    let s = spec("all", false, 16);
    let n = |a| build_model::<f32>(a, &s, 0).unwrap().params.num_trainable();
    let (a, b, c) = (
        n(ArchitectureId::Densenet121),
        n(ArchitectureId::Densenet169),
        n(ArchitectureId::Densenet264),
    );
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn seeded_init_is_hash_equal_and_nondegenerate() {
    let s = spec("CT1+FLAIR", false, 8);
    for arch in ArchitectureId::ALL {
        let a = build_model::<f32>(arch, &s, 42).unwrap();
        let b = build_model::<f32>(arch, &s, 42).unwrap();
        let c = build_model::<f32>(arch, &s, 43).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_ne!(a.params.fingerprint(), c.params.fingerprint());
        let zeros = a
            .predict(ArrayD::zeros(IxDyn(&[1, 4, 8, 8, 8])), None)
            .unwrap()
            .logits;
        let ones = a
            .predict(ArrayD::ones(IxDyn(&[1, 4, 8, 8, 8])), None)
            .unwrap()
            .logits;
        assert_ne!(zeros, ones, "{arch}");
    }
}

#[test]
fn unknown_architecture_is_an_error() {
    assert!("ResNet50".parse::<ArchitectureId>().is_err());
    assert_eq!(
        "densenet-264".parse::<ArchitectureId>().unwrap(),
        ArchitectureId::Densenet264
    );
}

/// Central differences of `sum(logits * r)` at 10 random input voxels.
fn input_gradient_check(net: &Network<f64>, x: &ArrayD<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Array2::from_shape_simple_fn((x.shape()[0], 4), || rng.random_range(-1.0..1.0));
    let objective = |x: &ArrayD<f64>| -> f64 {
        let logits = net.predict(x.clone(), None).unwrap().logits;
        (&logits * &r).sum()
    };
    let mut g = Graph::new();
    let xi = g.input(x.clone(), true);
    let out = net.forward(&mut g, xi, None, Mode::Eval).unwrap();
    let grads = g.backward_from(out.logits, r.clone().into_dyn());
    let gx = grads.get(xi).unwrap();
    let gmax = gx.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(gmax > 0.0 && gx.iter().all(|v| v.is_finite()));
    let h = 1e-5;
    for _ in 0..10 {
        let idx: Vec<usize> = x.shape().iter().map(|&d| rng.random_range(0..d)).collect();
        let mut xp = x.clone();
        xp[IxDyn(&idx)] += h;
        let mut xm = x.clone();
        xm[IxDyn(&idx)] -= h;
        let num = (objective(&xp) - objective(&xm)) / (2.0 * h);
        let ana = gx[IxDyn(&idx)];
        assert!(
            (ana - num).abs() <= 1e-2 * num.abs().max(1e-3 * gmax),
            "{}: analytic {ana} numeric {num} at {idx:?}",
            net.arch
        );
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let s = spec("T1W+FLAIR", false, 16);
    let x = random_input(&[1, 4, 16, 16, 16], 5);
    for arch in ArchitectureId::ALL {
        let net = build_model::<f64>(arch, &s, 7).unwrap();
        input_gradient_check(&net, &x, 11);
    }
}

#[test]
fn clinical_fusion() {
    let s = spec("CT1", true, 8);
    let base = build_model::<f64>(ArchitectureId::Densenet121, &s, 3).unwrap();
    let x = random_input(&[2, 1, 8, 8, 8], 1);
    let same = fuse_clinical(base.clone(), 0);
    assert_eq!(
        base.predict(x.clone(), None).unwrap(),
        same.predict(x.clone(), None).unwrap()
    );

    let fused = fuse_clinical(base, 10);
    let c0 = Array2::<f64>::zeros((2, 10));
    let mut c1 = c0.clone();
    c1[[0, 0]] = 0.5;
    let a = fused.predict(x.clone(), Some(c0.clone())).unwrap().logits;
    let b = fused.predict(x.clone(), Some(c1)).unwrap().logits;
    assert!((&a - &b).iter().any(|d| d.abs() > 0.0));
    assert!(fused
        .predict(x.clone(), Some(Array2::zeros((2, 9))))
        .is_err());

    let mut g = Graph::new();
    let xi = g.input(x, true);
    let ci = g.input(ArrayD::from_elem(IxDyn(&[2, 10]), 1.0), true);
    let out = fused.forward(&mut g, xi, Some(ci), Mode::Eval).unwrap();
    let grads = g.backward_from(out.logits, ArrayD::ones(IxDyn(&[2, 4])));
    assert!(grads.get(ci).unwrap().iter().any(|v| v.abs() > 0.0));
    assert!(grads.get(xi).unwrap().iter().any(|v| v.abs() > 0.0));
}

#[test]
fn checkpoint_round_trip_and_partial_loads() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    let s = spec("T1W+T2W+FLAIR", false, 8);
    let net = fuse_clinical(
        build_model::<f32>(ArchitectureId::Densenet121, &s, 9).unwrap(),
        10,
    );
    save_checkpoint(&p, &net, "abc", 2, serde_json::Value::Null).unwrap();
    let (a, h) = load_checkpoint::<f32>(&p).unwrap();
    let (b, _) = load_checkpoint::<f32>(&p).unwrap();
    assert_eq!(
        (h.fold, h.config_hash.as_str(), h.clinical_dim),
        (2, "abc", 10)
    );
    assert_eq!(a.params.fingerprint(), net.params.fingerprint());
    let x = ArrayD::from_elem(IxDyn(&[1, 6, 8, 8, 8]), 0.3f32);
    let c = Some(Array2::from_elem((1, 10), 0.1f32));
    assert_eq!(
        a.predict(x.clone(), c.clone()).unwrap(),
        b.predict(x, c).unwrap()
    );

    let (_, tensors) = read_checkpoint(&p).unwrap();
    let mut other = build_model::<f32>(ArchitectureId::Densenet121, &s, 1).unwrap();
    assert_eq!(load_backbone(&mut other, &tensors, &p).unwrap(), 1.0);
    let mut alex = build_model::<f32>(ArchitectureId::AlexNet3D, &s, 1).unwrap();
    assert!(load_backbone(&mut alex, &tensors, &p).is_err());

    let mut bytes = std::fs::read(&p).unwrap();
    let text = String::from_utf8_lossy(&bytes[16..200]).to_string();
    assert!(text.contains("\"arch\""));
    let pos = bytes.windows(6).position(|w| w == b"\"fold\"").unwrap();
    bytes[pos + 1..pos + 5].copy_from_slice(b"FOLD");
    std::fs::write(&p, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&p).is_err());
}

#[test]
fn assembly_order_and_subtraction() {
    use rano_core::cohort::{RanoLabel, StudySample, TimepointRecord};
    let tp = |w: i64| TimepointRecord {
        patient_id: "p".into(),
        week: w,
        session: format!("week-{w}"),
        label: RanoLabel::PD,
        available: ModalitySet::all(),
        image_paths: Default::default(),
    };
    let sample = StudySample {
        patient_id: "p".into(),
        prev: tp(20),
        curr: tp(40),
        modalities: ModalitySet::all(),
        label: RanoLabel::PD,
    };
    let vol =
        |t: &rano_core::cohort::TimepointRecord, m: Modality| -> rano_core::Result<Array3<f32>> {
            let mi = Modality::ALL.iter().position(|&x| x == m).unwrap() as f32;
            Ok(Array3::from_shape_fn((3, 3, 3), |(i, j, k)| {
                mi * 100.0 + t.week as f32 + (i * 9 + j * 3 + k) as f32 * 0.01
            }))
        };
    let full = InputSpec::new(ModalitySet::all(), false, false, [3; 3]);
    let x = rano_core::models::assemble_input(&sample, &full, &mut |t, m| vol(t, m)).unwrap();
    assert_eq!(x.shape()[0], 8);
    for (c, m) in Modality::ALL.iter().enumerate() {
        assert_eq!(
            x.slice(ndarray::s![2 * c, .., .., ..]),
            vol(&sample.prev, *m).unwrap()
        );
        assert_eq!(
            x.slice(ndarray::s![2 * c + 1, .., .., ..]),
            vol(&sample.curr, *m).unwrap()
        );
    }
    let sub = spec("T1W+T2W+FLAIR", true, 3);
    let x = rano_core::models::assemble_input(&sample, &sub, &mut |t, m| vol(t, m)).unwrap();
    assert_eq!(x.shape()[0], 3);
    for (c, m) in [Modality::T1W, Modality::T2W, Modality::FLAIR]
        .iter()
        .enumerate()
    {
        let oracle = vol(&sample.curr, *m).unwrap() - vol(&sample.prev, *m).unwrap();
        for (a, b) in x
            .slice(ndarray::s![c, .., .., ..])
            .iter()
            .zip(oracle.iter())
        {
            assert_eq!(a, b);
        }
    }
}

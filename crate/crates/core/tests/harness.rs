use std::path::Path;

use flowcd::forge::procedural::{forge_procedural, ProceduralConfig};
use flowcd::forge::io;
use flowcd::harness::{
    bench, evaluate, history_csv, infer_pair, learning_rates, metric_line, train, BranchSelector, Checkpoint,
    JointNet, LabelOracle, ModelPredictor, Prediction, Predictor, RunConfig, CHECKPOINT_MAGIC,
};
use flowcd::nn::ParamGrads;
use flowcd::{BitemporalSample, Error, Execution, FlowField, Result, Tensor};

fn dataset(dir: &Path, pairs: usize) -> Vec<BitemporalSample> {
    let cfg = RunConfig::toy();
    let procedural = ProceduralConfig {
        pairs,
        ..cfg.forge.procedural.clone()
    };
    let m = forge_procedural(
        &dir.join("src"),
        &dir.join("ds"),
        &procedural,
        &cfg.forge.config,
        Execution::Sequential,
    )
    .unwrap();
    m.load_samples().unwrap()
}

fn short(epochs: usize) -> RunConfig {
    let mut c = RunConfig::toy();
    c.train.epochs = epochs;
    c.model.iterations = Some(3);
    c
}

#[test]
fn zero_epochs_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 2);
    let cfg = short(0);
    let fresh = JointNet::new(cfg.model.clone(), cfg.train.seed).unwrap();
    let ck = train(&cfg, &samples, |_| {}).unwrap();
    assert_eq!(ck.model.params.fingerprint(), fresh.params.fingerprint());
    assert_eq!(ck.history.len(), 1);
    let r = &ck.history[0];
    assert_eq!(r.epoch, 0);
    assert!(r.f1.is_some() && r.mepe.is_some() && r.loss.is_finite());
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 2);
    let mut cfg = short(2);
    cfg.train.batch_size = 2;
    cfg.train.execution = Execution::Sequential;
    let a = train(&cfg, &samples, |_| {}).unwrap();
    cfg.train.execution = Execution::Parallel;
    let b = train(&cfg, &samples, |_| {}).unwrap();
    assert_eq!(a.model.params.fingerprint(), b.model.params.fingerprint());
    assert_eq!(a.history.len(), 2);
    let csv = history_csv(&a.history);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,loss,l2,tversky,f1,mepe"));
}

#[test]
fn branch_learning_rates_differ_tenfold() {
    let mut cfg = short(1);
    cfg.train.of_lr = 1e-5;
    cfg.train.cd_lr = 1e-4;
    let mut model = JointNet::new(cfg.model.clone(), 0).unwrap();
    let before = model.params.clone();
    let mut grads = ParamGrads::new(model.params.len());
    for (id, _, t) in before.iter() {
        grads.add(id, &Tensor::full(t.shape(), 0.5));
    }
    let lrs = learning_rates(&model, &cfg);
    let mut opt = flowcd::nn::AdamW::new(cfg.train.optimizer, &model.params);
    opt.step(&mut model.params, &grads, |id| lrs[id.index()]);

    let mean_delta = |want_flow: bool| {
        let (mut sum, mut n) = (0.0, 0usize);
        for (id, name, t) in model.params.iter() {
            if model.is_flow_param(name) != want_flow {
                continue;
            }
            let old = before.get(id);
            // biases start at 0, so weight decay cannot blur the ratio there
            for (a, b) in t.data().iter().zip(old.data()) {
                if *b == 0.0 {
                    sum += (a - b).abs();
                    n += 1;
                }
            }
        }
        sum / n as f64
    };
    let (of, cd) = (mean_delta(true), mean_delta(false));
    let ratio = of / cd;
    assert!((ratio - 0.1).abs() < 1e-3, "of {of} cd {cd} ratio {ratio}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 1);
    let ck = train(&short(1), &samples, |_| {}).unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.epoch, 1);
    assert_eq!(back.history, ck.history);
    assert_eq!(back.config, ck.config);
    let s = &samples[0];
    let p0 = ck.model.predict(s, BranchSelector::Both).unwrap();
    let p1 = back.model.predict(s, BranchSelector::Both).unwrap();
    assert_eq!(p0, p1);
    let (o0, o1) = (ck.optimizer.unwrap(), back.optimizer.unwrap());
    assert_eq!(o0.step, o1.step);
    assert_eq!(o0.first, o1.first);
    assert_eq!(o0.second, o1.second);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ck = Checkpoint {
        config: short(0),
        epoch: 0,
        history: vec![],
        model: JointNet::new(short(0).model, 1).unwrap(),
        optimizer: None,
    };
    let bytes = ck.to_bytes();
    let p = Path::new("x.ckpt");
    assert!(Checkpoint::from_bytes(p, &bytes).is_ok());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    for broken in [&bytes[..bytes.len() - 8], &bad_magic[..], &bytes[..10]] {
        assert!(matches!(Checkpoint::from_bytes(p, broken), Err(Error::Format { .. })));
    }
    let mut long = bytes;
    long.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_bytes(p, &long).is_err());
}

#[test]
fn label_oracle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 2);
    let cfg = RunConfig::toy();
    let r = evaluate(&LabelOracle, &samples, &cfg.eval, Execution::Parallel).unwrap();
    assert_eq!(r.aggregate.f1(), Some(1.0));
    assert_eq!(r.aggregate.mepe, Some(0.0));
    assert!((r.aggregate.fepe.unwrap() - 1.0 / cfg.eval.epsilon).abs() < 1e-6);
    assert!(r.errors.is_empty());
    assert_eq!(metric_line(&r), "1.000 0.000 1000000.000");
}

#[test]
fn empty_evaluation_set_is_a_validation_error() {
    let cfg = RunConfig::toy();
    let err = evaluate(&LabelOracle, &[], &cfg.eval, Execution::Sequential).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

struct WrongShape;

impl Predictor for WrongShape {
    fn predict(&self, s: &BitemporalSample) -> Result<Prediction> {
        if s.id == "00000" {
            Ok(Prediction {
                flow: Some(FlowField::zeros(8, 8)),
                change: None,
            })
        } else {
            LabelOracle.predict(s)
        }
    }
}

#[test]
fn failing_samples_are_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 2);
    let r = evaluate(&WrongShape, &samples, &RunConfig::toy().eval, Execution::Sequential).unwrap();
    assert_eq!(r.errors.len(), 1);
    assert_eq!(r.errors[0].id, "00000");
    assert_eq!(r.samples.len(), 1);
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 1);
    let cfg = short(0);
    let model = JointNet::new(cfg.model.clone(), 3).unwrap();
    let before = model.params.fingerprint();
    let p = ModelPredictor {
        model: &model,
        branch: BranchSelector::Both,
    };
    let r = evaluate(&p, &samples, &cfg.eval, Execution::Sequential).unwrap();
    assert_eq!(model.params.fingerprint(), before);
    assert!(r.aggregate.fepe.is_some());
}

#[test]
fn single_branch_reports_leave_blanks() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 1);
    let cfg = short(0);
    let model = JointNet::new(cfg.model.clone(), 3).unwrap();
    for (branch, flow, change) in [
        (BranchSelector::OfOnly, true, false),
        (BranchSelector::CdOnly, false, true),
    ] {
        let p = ModelPredictor { model: &model, branch };
        let r = evaluate(&p, &samples, &cfg.eval, Execution::Sequential).unwrap();
        assert_eq!(r.aggregate.mepe.is_some(), flow);
        assert_eq!(r.aggregate.f1().is_some(), change);
        assert!(r.aggregate.fepe.is_none());
    }
}

#[test]
fn non_finite_loss_aborts_with_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 1);
    let mut cfg = short(1);
    cfg.train.iteration_supervision = false;
    // a huge step sends the weights to infinity after the first update
    cfg.train.cd_lr = 1e300;
    cfg.train.of_lr = 1e300;
    cfg.train.epochs = 3;
    cfg.train.clip_norm = 0.0;
    let err = train(&cfg, &samples, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn bench_reports_consistent_rates() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 1);
    let model = JointNet::new(short(0).model, 0).unwrap();
    let r = bench(&model, &samples[0].t0, &samples[0].t1, 2, 1).unwrap();
    assert_eq!((r.pairs, r.warmup), (2, 1));
    assert!(r.mean_seconds > 0.0 && r.mean_seconds.is_finite());
    assert!((r.fps * r.mean_seconds - 1.0).abs() < 1e-6);
    assert!(bench(&model, &samples[0].t0, &samples[0].t1, 0, 0).is_err());
}

#[test]
fn inference_writes_readable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 1);
    let model = JointNet::new(short(0).model, 0).unwrap();
    let ds = dir.path().join("ds");
    let (t0, t1) = (ds.join("00000_t0.png"), ds.join("00000_t1.png"));
    let a = infer_pair(&model, &t0, &t1, &dir.path().join("a"), 0.5).unwrap();
    let b = infer_pair(&model, &t0, &t1, &dir.path().join("b"), 0.5).unwrap();
    assert_eq!(a.cropped_to, None);
    let flow = io::read_flo(&a.flow).unwrap();
    assert_eq!((flow.height(), flow.width()), (samples[0].height(), samples[0].width()));
    for (x, y) in [(&a.flow, &b.flow), (&a.change, &b.change), (&a.flow_color, &b.flow_color)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert!(io::read_mask_png(&a.change).is_ok());
}

#[test]
fn inference_crops_odd_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let img = flowcd::Image::filled(64, 72, [0.3, 0.5, 0.7]).unwrap();
    let bytes = img.to_rgb8();
    // 67×75 with the image in the middle
    let (h, w) = (67, 75);
    let mut big = vec![0u8; h * w * 3];
    for y in 0..64 {
        for x in 0..72 {
            let (sy, sx) = (y + 1, x + 1);
            big[(sy * w + sx) * 3..(sy * w + sx) * 3 + 3].copy_from_slice(&bytes[(y * 72 + x) * 3..(y * 72 + x) * 3 + 3]);
        }
    }
    let p = dir.path().join("odd.png");
    image::save_buffer(&p, &big, w as u32, h as u32, image::ColorType::Rgb8).unwrap();
    let model = JointNet::new(short(0).model, 0).unwrap();
    let out = infer_pair(&model, &p, &p, &dir.path().join("o"), 0.5).unwrap();
    assert_eq!(out.cropped_to, Some((72, 64)));
    let missing = infer_pair(&model, &dir.path().join("nope.png"), &p, &dir.path().join("o"), 0.5).unwrap_err();
    assert!(missing.to_string().contains("nope.png"));
}

#[test]
fn forge_config_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1);
    let m = flowcd::forge::DatasetManifest::load(&dir.path().join("ds/manifest.json")).unwrap();
    assert_eq!(m.config, RunConfig::toy().forge.config);
    assert_eq!(m.count, 1);
}

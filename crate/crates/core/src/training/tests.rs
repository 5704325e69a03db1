use std::path::Path;

use super::*;
use crate::autodiff::{Gradients, ParamStore, Tape, Tensor};
use crate::data::{build_dataset, Dataset, DatasetSpec, Split};
use crate::kspace::Snr;
use crate::model::{mcstra_forward, Ablation, McstraConfig, Sample};
use crate::rng::SeededRng;
use crate::Error;

fn tiny() -> McstraConfig {
    McstraConfig {
        cascade_length: 2,
        branch_dim: 8,
        cascade_dim: 16,
        tail_dim: 8,
        head_dim: 4,
        center_frac: 0.25,
        ..McstraConfig::full_size(16, 16)
    }
}

fn tiny_data() -> Dataset {
    build_dataset(&DatasetSpec::new(3, 2, 16, 16, 0.67, 5)).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        epochs: 1,
        ..TrainConfig::default()
    }
}

fn single(value: f64) -> (ParamStore, crate::autodiff::ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("p", Tensor::scalar(value)).unwrap();
    (s, id)
}

#[test]
fn rmsprop_zero_gradient_keeps_params() {
    let (mut s, _) = single(0.75);
    let before = s.clone();
    let mut opt = RmsProp::new(&s, 1e-4, 0.99, 1e-8).unwrap();
    let g = Gradients::zeros_like(&s);
    opt.step(&mut s, &g).unwrap();
    assert_eq!(s, before);
    assert_eq!(opt.steps, 1);
}

#[test]
fn rmsprop_descends_on_quadratic() {
    let (mut s, id) = single(1.0);
    let mut opt = RmsProp::new(&s, 1e-2, 0.99, 1e-8).unwrap();
    let g = {
        let mut t = Tape::new(&s);
        let p = t.param(id);
        let f = t.mul(p, p).unwrap();
        t.backward(f).unwrap()
    };
    opt.step(&mut s, &g).unwrap();
    let p = s.get(id).item().unwrap();
    assert!(p * p < 1.0, "p = {p}");
    // First step: v = 0.01·g², so the update is lr·g/(0.1·|g|) = 10·lr.
    assert!((p - (1.0 - 0.1)).abs() < 1e-6, "p = {p}");
}

#[test]
fn rmsprop_warm_start_takes_a_learning_rate_sized_first_step() {
    let (mut s, id) = single(1.0);
    let mut opt = RmsProp::new(&s, 1e-2, 0.99, 1e-8).unwrap();
    opt.warm_start = true;
    let g = Gradients::from_vec(vec![Tensor::scalar(4.0)]);
    opt.step(&mut s, &g).unwrap();
    assert!((s.get(id).item().unwrap() - 0.99).abs() < 1e-6);
    assert_eq!(opt.sq_avg[0].item().unwrap(), 16.0);
    // Later steps use the ordinary running average.
    opt.step(&mut s, &g).unwrap();
    assert_eq!(opt.sq_avg[0].item().unwrap(), 16.0);
    let zero = Gradients::zeros_like(&s);
    opt.step(&mut s, &zero).unwrap();
    assert!((opt.sq_avg[0].item().unwrap() - 0.99 * 16.0).abs() < 1e-5);
}

#[test]
fn rmsprop_solves_least_squares() {
    let mut rng = SeededRng::new(3);
    let (m, n) = (20, 5);
    let a = Tensor::from_fn(&[m, n], |_| rng.normal());
    let w_true = Tensor::from_fn(&[n, 1], |_| rng.normal());
    let b: Vec<f64> = (0..m)
        .map(|i| (0..n).map(|j| a.data()[i * n + j] * w_true.data()[j]).sum())
        .collect();
    let b = Tensor::new(vec![m, 1], b).unwrap();
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::zeros(&[n, 1])).unwrap();
    let mut opt = RmsProp::new(&store, 1e-2, 0.99, 1e-8).unwrap();
    let loss_and_grad = |store: &ParamStore| {
        let mut t = Tape::new(store);
        let w = t.param(id);
        let av = t.constant(a.clone()).unwrap();
        let bv = t.constant(b.clone()).unwrap();
        let pred = t.matmul(av, w).unwrap();
        let r = t.sub(pred, bv).unwrap();
        let sq = t.mul(r, r).unwrap();
        let l = t.sum(sq).unwrap();
        let l = t.scale(l, 1.0 / m as f64).unwrap();
        let v = t.value(l).item().unwrap();
        (v, t.backward(l).unwrap())
    };
    let (initial, _) = loss_and_grad(&store);
    for _ in 0..200 {
        let (_, g) = loss_and_grad(&store);
        opt.step(&mut store, &g).unwrap();
    }
    let (last, _) = loss_and_grad(&store);
    assert!(last < 1e-3 * initial, "initial {initial}, final {last}");
}

#[test]
fn rmsprop_rejects_nan_gradient_without_touching_params() {
    let (mut s, _) = single(2.0);
    let before = s.clone();
    let mut opt = RmsProp::new(&s, 1e-4, 0.99, 1e-8).unwrap();
    let mut g = Gradients::zeros_like(&s);
    // 0·NaN = NaN in every entry.
    g.scale(f64::NAN);
    assert!(opt.step(&mut s, &g).is_err());
    assert_eq!(s, before);
    assert_eq!(opt.steps, 0);
}

#[test]
fn clipping_rescales_to_the_limit() {
    let (s, id) = single(0.0);
    let mut g = {
        let mut t = Tape::new(&s);
        let p = t.param(id);
        let y = t.scale(p, 3.0).unwrap();
        t.backward(y).unwrap()
    };
    assert_eq!(clip_global_norm(&mut g, 1.0), 3.0);
    assert!((g.global_norm() - 1.0).abs() < 1e-15);
    assert_eq!(clip_global_norm(&mut g, 5.0), g.global_norm());
}

#[test]
fn run_config_roundtrip_and_errors() {
    let mut rc = RunConfig::default();
    rc.model = tiny();
    rc.train.lr = 3e-4;
    rc.train.fixed_masks = true;
    let text = rc.to_string();
    let back = RunConfig::parse(&text, Path::new("run.cfg")).unwrap();
    assert_eq!(back, rc);
    let err = RunConfig::parse("bogus = 1\n", Path::new("run.cfg")).unwrap_err();
    assert!(err.to_string().contains("run.cfg"), "{err}");
    assert!(RunConfig::parse("batch_size = 0\n", Path::new("x")).is_err());
}

#[test]
fn zero_epochs_is_a_no_op() {
    let cfg = tiny();
    let tc = TrainConfig { epochs: 0, ..quick() };
    let mut state = TrainState::new(&cfg, &tc).unwrap();
    let init = state.store.clone();
    let mut log = TrainLog::default();
    train(&cfg, &tc, &tiny_data(), &mut state, &mut log, &mut |_| {}).unwrap();
    assert_eq!(state.store, init);
    assert!(log.is_empty());
}

#[test]
fn training_is_deterministic_and_logs_consistently() {
    let cfg = tiny();
    let tc = TrainConfig { epochs: 2, val_every: 1, ..quick() };
    let data = tiny_data();
    let run = || {
        let mut state = TrainState::new(&cfg, &tc).unwrap();
        let mut log = TrainLog::default();
        let mut pins = Vec::new();
        train(&cfg, &tc, &data, &mut state, &mut log, &mut |s| pins.push(s.dc_pin)).unwrap();
        (state, log, pins)
    };
    let (a, log_a, pins) = run();
    let (b, log_b, _) = run();
    assert_eq!(a.store, b.store);
    assert_eq!(log_a, log_b);
    let train_vols = data.volumes(Split::Train).len();
    assert_eq!(train_vols, 2);
    // 4 training slices, batch 2, 2 epochs.
    assert_eq!(a.step(), 4);
    assert_eq!(a.epoch, 2);
    assert!(pins.iter().all(|&p| p < 1e-5), "{pins:?}");

    let csv = log_a.to_csv();
    assert_eq!(csv.lines().next().unwrap(), TRAIN_LOG_HEADER);
    let steps: Vec<usize> = log_a.rows.iter().map(|r| r.step).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    for r in &log_a.rows {
        for v in [r.loss, r.nmse, r.psnr, r.ssim].into_iter().flatten() {
            assert!(v.is_finite());
        }
    }
    assert_eq!(log_a.step_losses().len(), 4);
    assert_eq!(log_a.last_stage_nmse().len(), 2);
    assert_eq!(log_a.rows.iter().filter(|r| r.split == LogSplit::ZeroFilled).count(), 1);
    assert_eq!(log_a.rows.iter().filter(|r| r.split == LogSplit::TrainEpoch).count(), 2);
}

#[test]
fn max_steps_stops_early() {
    let cfg = tiny();
    let tc = TrainConfig { epochs: 5, max_steps: 3, ..quick() };
    let mut state = TrainState::new(&cfg, &tc).unwrap();
    let mut log = TrainLog::default();
    train(&cfg, &tc, &tiny_data(), &mut state, &mut log, &mut |_| {}).unwrap();
    assert_eq!(state.step(), 3);
}

#[test]
fn geometry_mismatch_between_data_and_model() {
    let cfg = McstraConfig::full_size(32, 32);
    let tc = quick();
    let mut state = TrainState::new(&tiny(), &tc).unwrap();
    let err = train(&cfg, &tc, &tiny_data(), &mut state, &mut TrainLog::default(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Geometry(_)));
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let rc = RunConfig {
        model: tiny(),
        train: TrainConfig { max_steps: 2, ..quick() },
    };
    let data = tiny_data();
    let mut state = TrainState::new(&rc.model, &rc.train).unwrap();
    train(&rc.model, &rc.train, &data, &mut state, &mut TrainLog::default(), &mut |_| {}).unwrap();

    let p1 = dir.path().join("a.mckp");
    let p2 = dir.path().join("b.mckp");
    save_checkpoint(&p1, &rc, &state).unwrap();
    assert!(checkpoint_config_path(&p1).exists());
    let (rc_back, loaded) = load_checkpoint(&p1).unwrap();
    assert_eq!(rc_back, rc);
    assert_eq!(loaded.store, state.store);
    assert_eq!(loaded.optimizer, state.optimizer);
    assert_eq!(loaded.epoch, state.epoch);
    save_checkpoint(&p2, &rc, &loaded).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let r = &data.records[0];
    let y_full = crate::kspace::fft2c(&r.image).unwrap();
    let mask = mask_protocol(&rc.model).volume_mask(16, 1, 0, None).unwrap();
    let y_hat = mask.apply(&y_full).unwrap();
    let sample = Sample {
        y_hat: &y_hat,
        mask: &mask,
        y_full: None,
    };
    let (a, _) = mcstra_forward(&state.store, &rc.model, &state.params, sample).unwrap();
    let (b, _) = mcstra_forward(&loaded.store, &rc.model, &loaded.params, sample).unwrap();
    assert_eq!(a, b);

    // A wider cascade cannot take these tensors.
    let other = RunConfig {
        model: McstraConfig { cascade_dim: 32, ..tiny() },
        ..rc.clone()
    };
    let err = load_checkpoint_with(&p1, &other).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    assert!(err.to_string().contains("cas."), "{err}");
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let rc = RunConfig { model: tiny(), train: quick() };
    let state = TrainState::new(&rc.model, &rc.train).unwrap();
    let p = dir.path().join("c.mckp");
    save_checkpoint(&p, &rc, &state).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
}

#[test]
fn accel_sweep_counts_rows_and_includes_baseline() {
    let cfg = tiny();
    let data = tiny_data();
    let (store, params) = crate::model::McstraParams::new_store(&cfg).unwrap();
    let sweep = Sweep::standard("accel").unwrap();
    let table = evaluate(&cfg, Some((&store, &params)), &data, Split::Val, &sweep, 4).unwrap();
    let slices = data.split(Split::Val).count();
    assert_eq!(table.entries.len(), slices * 5 * 2);
    assert_eq!(table.params(), ["4", "6", "8", "10", "12"]);
    let csv = table.to_csv();
    assert_eq!(csv.lines().next().unwrap(), EVAL_HEADER);
    let per_slice = csv.lines().skip(1).filter(|l| !l.contains(",mean,") && !l.contains(",sem,")).count();
    assert_eq!(per_slice, slices * 5 * 2);
    assert!(csv.contains("all,mean,zero_filled:accel,4,"));
    assert!(csv.contains("all,sem,mcstra:accel,12,"));
}

#[test]
fn infinite_snr_matches_clean_evaluation() {
    let cfg = tiny();
    let data = tiny_data();
    let (store, params) = crate::model::McstraParams::new_store(&cfg).unwrap();
    let model = Some((&store, &params));
    let clean = evaluate(&cfg, model, &data, Split::Val, &Sweep::Clean, 9).unwrap();
    let snr = evaluate(&cfg, model, &data, Split::Val, &Sweep::Snr(vec![Snr::Infinite]), 9).unwrap();
    assert_eq!(clean.entries.len(), snr.entries.len());
    for (a, b) in clean.entries.iter().zip(&snr.entries) {
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn zero_filled_degrades_with_noise() {
    let cfg = tiny();
    let data = build_dataset(&DatasetSpec::new(4, 2, 16, 16, 0.5, 2)).unwrap();
    let t = evaluate(&cfg, None, &data, Split::Val, &Sweep::standard("snr").unwrap(), 1).unwrap();
    assert!(t.entries.iter().all(|e| e.method == Method::ZeroFilled));
    let means: Vec<f64> = t.params().iter().map(|p| t.summary(Method::ZeroFilled, p, 0).0).collect();
    assert_eq!(means.len(), 7);
    // Across the noisy levels the error grows strictly. Between clean data
    // and 50 dB the expected change (~1e-5 relative) is below the spread of
    // the first-order magnitude cross-term, so only the end points are
    // compared there.
    assert!(means[1..].windows(2).all(|w| w[0] < w[1]), "{means:?}");
    assert!(means[0] < means[6], "{means:?}");
}

#[test]
fn ablation_table_has_one_row_per_variant_and_metric() {
    let rc = RunConfig {
        model: tiny(),
        train: TrainConfig { max_steps: 1, ..quick() },
    };
    let tags = [Ablation::A, Ablation::D, Ablation::F];
    let results = run_ablations(&rc, &tags, &tiny_data(), &mut |_, _| {}).unwrap();
    assert_eq!(results.len(), 3);
    let csv = ablation_csv(&results);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7 * 3);
    assert_eq!(rows.iter().filter(|r| r.starts_with("val_nmse,")).count(), 3);
    // F starts exactly where D does: the PSF projection is zero-initialised.
    assert_eq!(results[1].first_loss, results[2].first_loss);
}

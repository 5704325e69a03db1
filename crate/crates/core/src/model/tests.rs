use std::path::Path;

use super::*;
use crate::autodiff::{check_param_gradients, ParamStore, Tape, Tensor};
use crate::data::shepp_logan;
use crate::kspace::{
    equispaced_line_mask, fft2c, ifft2c, random_line_mask, ComplexRaster, DcWeight, SamplingMask,
};
use crate::rng::SeededRng;

/// 16×16 configuration small enough for exhaustive checks.
fn tiny() -> McstraConfig {
    McstraConfig {
        cascade_length: 2,
        branch_dim: 8,
        cascade_dim: 16,
        tail_dim: 8,
        head_dim: 4,
        ..McstraConfig::full_size(16, 16)
    }
}

struct Problem {
    y_full: ComplexRaster,
    y_hat: ComplexRaster,
    mask: SamplingMask,
}

impl Problem {
    fn new(cfg: &McstraConfig, seed: u64) -> Problem {
        let img = shepp_logan(cfg.height, cfg.width).unwrap();
        let y_full = fft2c(&img).unwrap();
        let mask = random_line_mask(cfg.width, cfg.accel as f64, 0.25, seed).unwrap();
        let y_hat = mask.apply(&y_full).unwrap();
        Problem { y_full, y_hat, mask }
    }

    fn sample(&self) -> Sample<'_> {
        Sample {
            y_hat: &self.y_hat,
            mask: &self.mask,
            y_full: Some(&self.y_full),
        }
    }
}

/// Replace every parameter by small random values so no path is trivially
/// zero (the PSF projection starts at zero).
fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = SeededRng::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id).clone();
        let v = p.data().iter().map(|x| x + scale * rng.normal()).collect();
        store.set(id, Tensor::new(p.shape().to_vec(), v).unwrap()).unwrap();
    }
}

fn max_diff(a: &ComplexRaster, b: &ComplexRaster) -> f64 {
    a.max_abs_diff(b)
}

#[test]
fn beta_linear_schedule_is_exact() {
    let b = beta_schedule(5, BetaSchedule::Linear);
    let want = [1.0 / 15.0, 2.0 / 15.0, 3.0 / 15.0, 4.0 / 15.0, 5.0 / 15.0];
    assert_eq!(b, want);
    for n in 1..=8 {
        let s: f64 = beta_schedule(n, BetaSchedule::Linear).iter().sum();
        assert!((s - 1.0).abs() < 1e-15, "n={n} sum={s}");
        assert_eq!(beta_schedule(n, BetaSchedule::FinalOnly).iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn default_weights() {
    let c = McstraConfig::default();
    assert_eq!((c.alpha_l, c.alpha_h), (0.5, 0.5));
    assert_eq!((c.gamma_branch, c.gamma_cas, c.gamma_tail), (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0));
    assert_eq!(c.dc_lambda, DcWeight::Infinite);
    assert_eq!(c.ablation, Ablation::F);
}

#[test]
fn config_text_roundtrip_and_unknown_key() {
    let mut c = tiny();
    c.ablation = Ablation::C;
    c.beta = BetaSchedule::FinalOnly;
    c.dc_lambda = DcWeight::finite(2.5).unwrap();
    c.depths = vec![2, 4];
    let back: McstraConfig = c.to_string().parse().unwrap();
    assert_eq!(back, c);

    assert!(matches!("no_such_key = 3".parse::<McstraConfig>(), Err(crate::Error::Config(_))));
    assert!(parse_kv("a = 1\na = 2\n", Path::new("x")).is_err());
}

#[test]
fn zero_residual_gives_zero_total_loss() {
    let cfg = tiny();
    let p = Problem::new(&cfg, 1);
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let (rl, rh) = branch_references(&cfg, &p.y_full).unwrap();
    let xl = t.constant(raster_to_tensor(&rl)).unwrap();
    let xh = t.constant(raster_to_tensor(&rh)).unwrap();
    let lb = branch_loss(&mut t, &cfg, xl, xh, &p.y_full).unwrap();
    let x = t.constant(raster_to_tensor(&ifft2c(&p.y_full).unwrap())).unwrap();
    let lc = cascade_loss(&mut t, &cfg, &[x, x], &p.y_full).unwrap();
    let m = reference_magnitude(&p.y_full).unwrap();
    let mt = t.constant(Tensor::new(vec![1, 16, 16], m.data().to_vec()).unwrap()).unwrap();
    let lt = tail_loss(&mut t, mt, &p.y_full).unwrap();
    let total = total_loss(&mut t, &cfg, Some(lb), lc, lt).unwrap();
    assert_eq!(t.value(total).item().unwrap(), 0.0);
}

#[test]
fn partitions_are_complementary() {
    for ablation in [Ablation::F, Ablation::E] {
        let cfg = McstraConfig {
            ablation,
            ..McstraConfig::toy()
        };
        let (ml, mh) = branch_partition(&cfg).unwrap().unwrap();
        assert!(ml.data().iter().zip(mh.data()).all(|(a, b)| a != b));
        assert!(ml.count() > 0 && mh.count() > 0);
        // The two branch references add up to the full image.
        let p = Problem::new(&cfg, 3);
        let (rl, rh) = branch_references(&cfg, &p.y_full).unwrap();
        let x = ifft2c(&p.y_full).unwrap();
        assert!(max_diff(&rl.add(&rh).unwrap(), &x) < 1e-12);
    }
    for ablation in [Ablation::A, Ablation::B] {
        let cfg = McstraConfig {
            ablation,
            ..McstraConfig::toy()
        };
        assert!(branch_partition(&cfg).unwrap().is_none());
    }
}

#[test]
fn e_pos_depends_only_on_mask() {
    let cfg = tiny();
    let (mut store, params) = McstraParams::new_store(&cfg).unwrap();
    randomize(&mut store, 9, 0.1);
    let pe = |mask: &SamplingMask| {
        let mut t = Tape::new(&store);
        let v = pe_generate(&mut t, &cfg, &params, mask).unwrap();
        t.value(v).clone()
    };
    let m1 = random_line_mask(16, 4.0, 0.25, 1).unwrap();
    let m1b = SamplingMask::from_lines(m1.lines().to_vec()).unwrap();
    let m2 = equispaced_line_mask(16, 4, 0.25, 0).unwrap();
    assert_ne!(m1.lines(), m2.lines());
    let a = pe(&m1);
    assert_eq!(a.shape(), &[cfg.tokens(), cfg.branch_dim]);
    assert_eq!(a, pe(&m1b));
    assert!(a.max_abs_diff(&pe(&m2)) > 1e-6);

    // Without the PSF path the embedding is the absolute table alone.
    let cfg_d = McstraConfig {
        ablation: Ablation::D,
        ..tiny()
    };
    let (store_d, params_d) = McstraParams::new_store(&cfg_d).unwrap();
    assert!(params_d.psf_proj.is_none());
    let mut t = Tape::new(&store_d);
    let v = pe_generate(&mut t, &cfg_d, &params_d, &m1).unwrap();
    assert_eq!(t.value(v), store_d.get(params_d.e_abs));
}

#[test]
fn hard_dc_pins_every_stage() {
    let cfg = tiny();
    let (mut store, params) = McstraParams::new_store(&cfg).unwrap();
    randomize(&mut store, 4, 0.05);
    let p = Problem::new(&cfg, 5);
    let mut t = Tape::new(&store);
    let fv = mcstra_forward_on_tape(&mut t, &cfg, &params, p.sample()).unwrap();
    assert_eq!(fv.stages.len(), 2);
    for &s in &fv.stages {
        let k = fft2c(&tensor_to_raster(t.value(s)).unwrap()).unwrap();
        let mut worst: f64 = 0.0;
        for r in 0..16 {
            for c in (0..16).filter(|&c| p.mask.is_sampled(c)) {
                worst = worst.max((k.get(r, c) - p.y_hat.get(r, c)).norm());
            }
        }
        assert!(worst < 1e-5, "pin violated by {worst}");
    }
}

#[test]
fn zero_network_with_hard_dc_returns_zero_filled() {
    let cfg = tiny();
    let (mut store, params) = McstraParams::new_store(&cfg).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let z = Tensor::zeros(store.get(id).shape());
        store.set(id, z).unwrap();
    }
    let p = Problem::new(&cfg, 6);
    let mut t = Tape::new(&store);
    let fv = mcstra_forward_on_tape(&mut t, &cfg, &params, p.sample()).unwrap();
    let zf = zero_filled(&p.y_hat).unwrap();
    for &s in &fv.stages {
        assert!(max_diff(&tensor_to_raster(t.value(s)).unwrap(), &zf) < 1e-12);
    }
}

#[test]
fn cascade_shares_weights_across_stages() {
    let counts: Vec<usize> = [1, 3, 5]
        .iter()
        .map(|&n| {
            let cfg = McstraConfig {
                cascade_length: n,
                ..tiny()
            };
            let (store, _) = McstraParams::new_store(&cfg).unwrap();
            assert!(store.num_scalars_with_prefix("cas.") > 0);
            store.num_scalars()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}

#[test]
fn mutating_shared_cascade_weights_moves_every_stage() {
    let cfg = McstraConfig {
        cascade_length: 3,
        ..tiny()
    };
    let (mut store, params) = McstraParams::new_store(&cfg).unwrap();
    randomize(&mut store, 11, 0.05);
    let p = Problem::new(&cfg, 12);
    let stages = |store: &ParamStore| -> Vec<ComplexRaster> {
        let mut t = Tape::new(store);
        let fv = mcstra_forward_on_tape(&mut t, &cfg, &params, p.sample()).unwrap();
        fv.stages
            .iter()
            .map(|&s| tensor_to_raster(t.value(s)).unwrap())
            .collect()
    };
    let before = stages(&store);
    let id = store.find("cas.head.w").unwrap();
    let w = store.get(id).clone();
    let bumped = w.data().iter().map(|x| x + 0.1).collect();
    store.set(id, Tensor::new(w.shape().to_vec(), bumped).unwrap()).unwrap();
    let after = stages(&store);
    assert_eq!(before.len(), 3);
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        let d = max_diff(b, a);
        assert!(d > 1e-6, "stage {} unchanged ({d})", i + 1);
    }
}

#[test]
fn every_ablation_is_finite_on_a_random_toy_instance() {
    for a in Ablation::ALL {
        let cfg = McstraConfig { ablation: a, ..McstraConfig::toy() };
        let (mut store, params) = McstraParams::new_store(&cfg).unwrap();
        randomize(&mut store, 21, 0.02);
        let mut rng = SeededRng::new(22);
        let n = cfg.height * cfg.width;
        let re: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let im: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let img = ComplexRaster::from_channels(cfg.height, cfg.width, &re, &im).unwrap();
        let y_full = fft2c(&img).unwrap();
        let mask = random_line_mask(cfg.width, cfg.accel as f64, cfg.center_frac, 23).unwrap();
        let y_hat = mask.apply(&y_full).unwrap();
        let sample = Sample { y_hat: &y_hat, mask: &mask, y_full: Some(&y_full) };
        let mut t = Tape::new(&store);
        let fv = mcstra_forward_on_tape(&mut t, &cfg, &params, sample).unwrap();
        let total = fv.losses.unwrap().total;
        let loss = t.value(total).item().unwrap();
        assert!(loss.is_finite(), "{a}: {loss}");
        let g = t.backward(total).unwrap();
        g.ensure_finite(&store).unwrap();
    }
}

#[test]
fn ablation_parameter_sets() {
    let count = |a: Ablation| {
        let cfg = McstraConfig { ablation: a, ..tiny() };
        let (store, params) = McstraParams::new_store(&cfg).unwrap();
        (store, params)
    };
    let (sf, pf) = count(Ablation::F);
    let (sb, _) = count(Ablation::B);
    let (se, _) = count(Ablation::E);
    assert_eq!(sf.num_scalars(), sb.num_scalars());
    assert_eq!(sf.num_scalars(), se.num_scalars());
    let (sa, pa) = count(Ablation::A);
    assert!(pa.low.is_none() && pa.high.is_none() && pf.low.is_some());
    assert_eq!(sa.num_scalars_with_prefix("low."), 0);
    assert_eq!(
        sf.num_scalars() - sa.num_scalars(),
        sf.num_scalars_with_prefix("low.") + sf.num_scalars_with_prefix("high.")
    );
    // Shared components start from identical values across variants.
    let id_f = sf.find("cas.head.w").unwrap();
    let id_a = sa.find("cas.head.w").unwrap();
    assert_eq!(sf.get(id_f), sa.get(id_a));
    let (_, pc) = count(Ablation::C);
    assert_eq!(pc.tail.geometry.in_channels, 2);
    assert_eq!(pf.tail.geometry.in_channels, 1);
}

#[test]
fn every_ablation_runs_and_every_group_learns() {
    for a in Ablation::ALL {
        let cfg = McstraConfig { ablation: a, ..tiny() };
        let (store, params) = McstraParams::new_store(&cfg).unwrap();
        let p = Problem::new(&cfg, 7);
        let mut t = Tape::new(&store);
        let fv = mcstra_forward_on_tape(&mut t, &cfg, &params, p.sample()).unwrap();
        let l = fv.losses.unwrap();
        assert_eq!(l.branch.is_none(), a == Ablation::A);
        let loss = t.value(l.total).item().unwrap();
        assert!(loss.is_finite() && loss > 0.0, "{a}: {loss}");
        let g = t.backward(l.total).unwrap();
        g.ensure_finite(&store).unwrap();
        if a == Ablation::F {
            for (group, prefix) in PARAM_GROUPS {
                let norm: f64 = store
                    .iter()
                    .filter(|(_, n, _)| n.starts_with(prefix))
                    .map(|(id, _, _)| g.get(id).norm_sqr())
                    .sum();
                assert!(norm > 0.0, "group {group} receives no gradient");
            }
        }
    }
}

#[test]
fn report_has_metrics_and_stage_nmse() {
    let cfg = tiny();
    let (store, params) = McstraParams::new_store(&cfg).unwrap();
    let p = Problem::new(&cfg, 8);
    let (img, rep) = mcstra_forward(&store, &cfg, &params, p.sample()).unwrap();
    assert_eq!(img.shape(), (16, 16));
    assert_eq!(rep.stage_nmse.len(), 2);
    assert!(rep.nmse.unwrap().is_finite() && rep.ssim.unwrap() <= 1.0);
    assert!(rep.losses.unwrap().total > 0.0);

    let blind = Sample { y_full: None, ..p.sample() };
    let (img2, rep2) = mcstra_forward(&store, &cfg, &params, blind).unwrap();
    assert_eq!(img, img2);
    assert!(rep2.nmse.is_none() && rep2.losses.is_none() && rep2.stage_nmse.is_empty());
}

#[test]
fn geometry_mismatch_is_rejected() {
    let cfg = tiny();
    let (store, params) = McstraParams::new_store(&cfg).unwrap();
    let big = McstraConfig::full_size(32, 32);
    let p = Problem::new(&big, 1);
    let err = mcstra_forward(&store, &cfg, &params, p.sample()).unwrap_err();
    assert!(matches!(err, crate::Error::Geometry(_)), "{err}");
}

#[test]
fn trainable_lambda_gradient() {
    let cfg = McstraConfig {
        dc_lambda: DcWeight::finite(0.7).unwrap(),
        train_lambda: true,
        cascade_length: 1,
        ..tiny()
    };
    let (mut store, params) = McstraParams::new_store(&cfg).unwrap();
    randomize(&mut store, 11, 0.05);
    let id = params.log_lambda.expect("trainable weight registered");
    let p = Problem::new(&cfg, 12);
    let checks = check_param_gradients(
        &store,
        |t| {
            let fv = mcstra_forward_on_tape(t, &cfg, &params, p.sample())?;
            Ok(fv.losses.unwrap().total)
        },
        &[id],
        1,
        1e-6,
        3,
    )
    .unwrap();
    for c in &checks {
        assert!(c.analytic.abs() > 1e-8, "λ gradient vanished");
        assert!(c.rel_err(1e-8) < 1e-4, "{c:?}");
    }
}

#[test]
fn soft_dc_is_between_network_and_measurement() {
    // With λ finite the sampled lines are a convex mix, so they move off the
    // measurement but stay closer to it than the zero network output.
    let cfg = McstraConfig {
        dc_lambda: DcWeight::finite(1.0).unwrap(),
        cascade_length: 1,
        ..tiny()
    };
    let (store, params) = McstraParams::new_store(&cfg).unwrap();
    let p = Problem::new(&cfg, 2);
    let mut t = Tape::new(&store);
    let fv = mcstra_forward_on_tape(&mut t, &cfg, &params, p.sample()).unwrap();
    let k = fft2c(&tensor_to_raster(t.value(fv.stages[0])).unwrap()).unwrap();
    let c = (0..16).find(|&c| p.mask.is_sampled(c)).unwrap();
    let r = 8;
    let d = (k.get(r, c) - p.y_hat.get(r, c)).norm();
    assert!(d > 0.0 && d < p.y_hat.get(r, c).norm());
}

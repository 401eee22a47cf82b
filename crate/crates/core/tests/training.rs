mod common;

use common::{random_bag, rel_err};
use proptest::prelude::*;
use slotmil::augment::{
    one_hot, slot_mixup, submix_step, subsample, subsample_count, AugmentConfig,
};
use slotmil::data::{synth_dataset, Bag, Split, SynthConfig};
use slotmil::model::{init_model, MilModel, ModelConfig, ModelKind};
use slotmil::train::{
    adam_step, checkpoint_name, cosine_wr_lr, fit, mc_inference, AdamState, McAverage, RunSplits,
    TrainConfig, CHECKPOINT_INDEX,
};
use slotmil::{RngStream, Tape, Tensor};

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1u128, |c, i| c * (n - i) / (i + 1))
}

#[test]
fn hypergeometric_flip_rate() {
    let exact = binomial(180, 20) as f64 / binomial(200, 20) as f64;
    let product: f64 = (0..20).map(|i| (180 - i) as f64 / (200 - i) as f64).product();
    assert!((exact - product).abs() < 1e-12);
    assert!((exact - 0.1089).abs() < 5e-4, "{exact}");

    let latent: Vec<u8> = (0..200).map(|i| (i % 10 == 0) as u8).collect();
    let feats = Tensor::new(vec![200, 1], (0..200).map(|i| i as f32).collect()).unwrap();
    let bag = Bag::new("b", feats, 1).unwrap().with_latent(latent).unwrap();
    let mut rng = RngStream::new(5, 0);
    let trials = 100_000;
    let mut flips = 0;
    for _ in 0..trials {
        let s = subsample(&bag, 0.1, &mut rng).unwrap();
        assert_eq!(s.num_instances(), 20);
        if Bag::label_from_latent(s.latent_labels.as_ref().unwrap()) == 0 {
            flips += 1;
        }
    }
    let rate = flips as f64 / trials as f64;
    let se = (exact * (1.0 - exact) / trials as f64).sqrt();
    assert!((rate - exact).abs() < 3.0 * se, "rate {rate} exact {exact} se {se}");
}

#[test]
fn subsampled_macs_scale_with_p() {
    let m = init_model::<f64>(4, 2, 8, 6, 2, 0).unwrap();
    let macs = |bag: &Bag| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let x = m.embed(&mut tape, &b, &bag.features).unwrap();
        m.forward(&mut tape, &b, x).unwrap();
        tape.macs() as f64
    };
    let mut rng = RngStream::new(0, 0);
    let full = random_bag(&mut rng, 200, 6, 0);
    let one = macs(&full.select(&[0]).unwrap());
    let two = macs(&full.select(&[0, 1]).unwrap());
    let per_patch = two - one;
    let fixed = one - per_patch;
    let m_full = macs(&full);
    for p in [0.1, 0.25, 0.4, 0.7] {
        let sub = macs(&subsample(&full, p, &mut rng).unwrap());
        let expect = fixed + p * (m_full - fixed);
        assert!((sub - expect).abs() <= per_patch, "p={p}: {sub} vs {expect}");
    }
}

fn plain_logits(m: &MilModel<f64>, bag: &Bag) -> Vec<f64> {
    m.predict(bag).unwrap().logits.into_data()
}

fn step_logits(m: &MilModel<f64>, bag: &Bag, pool: &[&Bag], cfg: &AugmentConfig, epoch: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Option<(f64, usize)>, f64) {
    let mut tape = Tape::new();
    let b = m.bind(&mut tape);
    let mut rng = RngStream::new(seed, 3);
    let out = submix_step(m, &mut tape, &b, bag, pool, cfg, epoch, 10, &mut rng).unwrap();
    let loss = tape.softmax_xent(out.logits, &out.target).unwrap();
    (
        tape.value(out.logits).data().to_vec(),
        out.target,
        out.mix,
        tape.value(loss).item().unwrap(),
    )
}

#[test]
fn disabled_augmentation_is_plain_forward() {
    let m = init_model::<f64>(3, 2, 8, 5, 2, 1).unwrap();
    let mut rng = RngStream::new(1, 0);
    let bag = random_bag(&mut rng, 12, 5, 1);
    let other = random_bag(&mut rng, 9, 5, 0);
    let (logits, target, mix, _) = step_logits(&m, &bag, &[&other], &AugmentConfig::none(), 5, 0);
    assert_eq!(logits, plain_logits(&m, &bag));
    assert_eq!(target, vec![0.0, 1.0]);
    assert!(mix.is_none());

    let (_, _, _, loss_p1) = step_logits(&m, &bag, &[&other], &AugmentConfig::subsampling(1.0), 5, 0);
    let (_, _, _, loss_plain) = step_logits(&m, &bag, &[&other], &AugmentConfig::none(), 5, 0);
    assert_eq!(loss_p1, loss_plain);
}

#[test]
fn late_mix_keeps_one_hot_before_start() {
    let m = init_model::<f64>(3, 2, 8, 5, 2, 1).unwrap();
    let mut rng = RngStream::new(2, 0);
    let bag = random_bag(&mut rng, 12, 5, 1);
    let other = random_bag(&mut rng, 9, 5, 0);
    let cfg = AugmentConfig::submix(0.5, 1.0, 0.3);
    for epoch in 0..3 {
        let (_, target, mix, _) = step_logits(&m, &bag, &[&other], &cfg, epoch, epoch as u64);
        assert_eq!(target, vec![0.0, 1.0]);
        assert!(mix.is_none());
    }
    let (_, target, mix, _) = step_logits(&m, &bag, &[&other], &cfg, 3, 0);
    let (lam, j) = mix.expect("mixing from epoch 3");
    assert_eq!(j, 0);
    assert!((target[1] - lam).abs() < 1e-15 && (target[0] - (1.0 - lam)).abs() < 1e-15);
    // baselines never mix
    let pool_model = MilModel::<f64>::new(ModelConfig::baseline(ModelKind::MeanPool, 4, 5, 2), 0).unwrap();
    let (_, target, mix, _) = step_logits(&pool_model, &bag, &[&other], &cfg, 9, 0);
    assert!(mix.is_none() && target == vec![0.0, 1.0]);
}

#[test]
fn submix_is_seeded() {
    let m = init_model::<f64>(3, 2, 8, 5, 2, 1).unwrap();
    let mut rng = RngStream::new(3, 0);
    let bags: Vec<Bag> = (0..4).map(|i| random_bag(&mut rng, 10 + i, 5, i % 2)).collect();
    let pool: Vec<&Bag> = bags.iter().collect();
    let cfg = AugmentConfig::submix(0.4, 0.5, 0.0);
    let a = step_logits(&m, &bags[0], &pool, &cfg, 0, 17);
    let b = step_logits(&m, &bags[0], &pool, &cfg, 0, 17);
    assert_eq!(a.0, b.0);
    assert_eq!(a.2, b.2);
    let c = step_logits(&m, &bags[0], &pool, &cfg, 0, 18);
    assert_ne!(a.0, c.0);
}

#[test]
fn mixup_loss_endpoints_and_linearity() {
    let m = init_model::<f64>(4, 2, 8, 5, 2, 2).unwrap();
    let mut rng = RngStream::new(4, 0);
    let (bi, bj) = (random_bag(&mut rng, 11, 5, 1), random_bag(&mut rng, 14, 5, 0));
    let (si, sj) = (
        m.predict(&bi).unwrap().slots.unwrap(),
        m.predict(&bj).unwrap().slots.unwrap(),
    );
    let (yi, yj) = (one_hot::<f64>(1, 2), one_hot::<f64>(0, 2));
    let loss = |slots: &Tensor<f64>, y: &[f64]| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let s = tape.constant(slots.clone());
        let l = m.logits_from_slots(&mut tape, &b, s).unwrap();
        let v = tape.softmax_xent(l, y).unwrap();
        tape.value(v).item().unwrap()
    };
    let (s1, y1) = slot_mixup(&si, &yi, &sj, &yj, 1.0).unwrap();
    assert_eq!(loss(&s1, &y1), loss(&si, &yi));
    let (s0, y0) = slot_mixup(&si, &yi, &sj, &yj, 0.0).unwrap();
    assert_eq!(loss(&s0, &y0), loss(&sj, &yj));
    let (sh, yh) = slot_mixup(&si, &yi, &sj, &yj, 0.5).unwrap();
    assert_eq!(yh, vec![0.5, 0.5]);
    let mean = 0.5 * (loss(&sh, &yi) + loss(&sh, &yj));
    assert!((loss(&sh, &yh) - mean).abs() < 1e-10);
}

#[test]
fn submix_gradients_match_finite_differences() {
    let mut m = init_model::<f64>(2, 2, 4, 3, 2, 9).unwrap();
    let mut rng = RngStream::new(6, 0);
    for t in m.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.normal());
    }
    let bags: Vec<Bag> = (0..3).map(|i| random_bag(&mut rng, 6 + i, 3, i % 2)).collect();
    let pool: Vec<&Bag> = bags.iter().collect();
    let cfg = AugmentConfig::submix(0.7, 1.0, 0.0);
    let run = |m: &MilModel<f64>, grad: bool| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let mut rng = RngStream::new(1, 1);
        let out = submix_step(m, &mut tape, &b, &bags[0], &pool, &cfg, 0, 1, &mut rng).unwrap();
        assert!(out.mix.is_some());
        let l = tape.softmax_xent(out.logits, &out.target).unwrap();
        let v = tape.value(l).item().unwrap();
        (v, grad.then(|| tape.grad(l, b.vars()).unwrap()))
    };
    let grads = run(&m, true).1.unwrap();
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe.params().tensors()[k].data()[j];
            probe.params_mut().tensors_mut()[k].data_mut()[j] = orig + 1e-5;
            let lp = run(&probe, false).0;
            probe.params_mut().tensors_mut()[k].data_mut()[j] = orig - 1e-5;
            let lm = run(&probe, false).0;
            probe.params_mut().tensors_mut()[k].data_mut()[j] = orig;
            worst = worst.max(rel_err(g.data()[j], (lp - lm) / 2e-5));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

/// Scalar Adam written out from its update equations.
fn adam_oracle(theta0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let g = g + wd * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let n = (t + 1) as i32;
        theta -= lr * (m / (1.0 - b1.powi(n))) / ((v / (1.0 - b2.powi(n))).sqrt() + eps);
    }
    theta
}

#[test]
fn adam_matches_recurrence() {
    for wd in [0.0, 1e-4, 0.1] {
        let cfg = TrainConfig {
            weight_decay: wd,
            ..TrainConfig::default()
        };
        let mut p = vec![Tensor::scalar(0.3f64)];
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[Tensor::scalar(0.8)], &mut s, 1e-2, &cfg).unwrap();
        }
        assert_eq!(s.t, 3);
        let expect = adam_oracle(0.3, &[0.8; 3], 1e-2, wd);
        assert!((p[0].item().unwrap() - expect).abs() < 1e-12);
    }
    // constant gradient, no decay: every step moves by lr·g/(|g| + eps)
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut p = vec![Tensor::scalar(0.0f64)];
    let mut s = AdamState::new(&p);
    for _ in 0..3 {
        adam_step(&mut p, &[Tensor::scalar(2.0)], &mut s, 1e-3, &cfg).unwrap();
    }
    assert!((p[0].item().unwrap() + 3.0 * 1e-3 * 2.0 / (2.0 + 1e-8)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn schedule_bounded(epoch in 0usize..400, epochs in 5usize..400, restarts in 1usize..6, base in 1e-6f64..1.0) {
        prop_assume!(epochs >= restarts && epoch < epochs);
        let lr = cosine_wr_lr(epoch, base, epochs, restarts);
        prop_assert!(lr >= 0.0 && lr <= base);
        let cycle = epochs.div_ceil(restarts);
        if epoch % cycle == 0 {
            prop_assert_eq!(lr, base);
        }
    }

    #[test]
    fn mixup_is_symmetric(vals in proptest::collection::vec(-10.0f64..10.0, 12), lam in 0.0f64..1.0) {
        let a = Tensor::new(vec![2, 3], vals[..6].to_vec()).unwrap();
        let b = Tensor::new(vec![2, 3], vals[6..].to_vec()).unwrap();
        let (x, ya) = slot_mixup(&a, &[1.0, 0.0], &b, &[0.0, 1.0], lam).unwrap();
        let (y, yb) = slot_mixup(&b, &[0.0, 1.0], &a, &[1.0, 0.0], 1.0 - lam).unwrap();
        prop_assert!(x.max_abs_diff(&y) < 1e-13);
        prop_assert!((ya[0] - yb[0]).abs() < 1e-15);
    }

    #[test]
    fn subsample_rows_are_input_rows(m in 1usize..80, p in 0.01f64..=1.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let bag = random_bag(&mut rng, m, 3, 0);
        let s = subsample(&bag, p, &mut rng).unwrap();
        prop_assert_eq!(s.num_instances(), subsample_count(m, p));
        prop_assert_eq!(s.num_instances(), ((p * m as f64 + 0.5).floor() as usize).max(1));
        let mut last = None;
        for i in 0..s.num_instances() {
            let row = s.features.row(i);
            let src = (0..m).find(|&r| bag.features.row(r) == row).unwrap();
            prop_assert!(last.is_none_or(|l| l < src));
            last = Some(src);
        }
    }
}

fn small_dataset(seed: u64) -> slotmil::data::Dataset {
    let mut cfg = SynthConfig::separated(12, 12, 6, 2.0, seed);
    cfg.m_range = (5, 20);
    cfg.valid_frac = 0.25;
    cfg.test_frac = 0.25;
    synth_dataset(&cfg).unwrap()
}

#[test]
fn fit_history_and_checkpoints() {
    let data = small_dataset(1);
    let splits = RunSplits::from_dataset(&data);
    let cfg = TrainConfig {
        epochs: 5,
        lr: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut m = init_model::<f32>(2, 2, 8, 6, 2, 0).unwrap();
    let h = fit(&mut m, &data, &splits, &cfg, &AugmentConfig::submix(0.5, 1.0, 0.2), Some(dir.path())).unwrap();
    assert_eq!(h.rows.len(), 15);
    assert_eq!(h.steps, 5 * splits.train.len());
    for (i, r) in h.rows.iter().enumerate() {
        assert_eq!(r.epoch, i / 3);
        assert_eq!(r.split, Split::ALL[i % 3]);
        assert!(r.loss.is_finite() && r.nll >= 0.0 && (0.0..=1.0).contains(&r.acc));
        assert!(r.entropy_top100.unwrap() <= 100f64.log2() + 1e-9);
    }
    for e in 0..5 {
        assert!(dir.path().join(checkpoint_name(e)).exists());
    }
    let index = std::fs::read_to_string(dir.path().join(CHECKPOINT_INDEX)).unwrap();
    assert_eq!(index.lines().count(), 6);
    assert!(index.starts_with("epoch,valid_auc\n0,"));
    let last: MilModel<f32> = slotmil::model::load_checkpoint(&dir.path().join(checkpoint_name(4))).unwrap();
    assert_eq!(last.params(), m.params());
    let csv = h.to_csv(true);
    assert!(csv.starts_with("epoch,split,loss,acc,auc,nll,ece,entropy_top100\n0,train,"));
}

#[test]
fn fit_is_deterministic() {
    let data = small_dataset(2);
    let splits = RunSplits::from_dataset(&data);
    let cfg = TrainConfig {
        epochs: 3,
        restarts: 1,
        seed: 9,
        ..TrainConfig::default()
    };
    let aug = AugmentConfig::submix(0.5, 0.5, 0.0);
    let run = || {
        let mut m = init_model::<f32>(2, 2, 8, 6, 2, 4).unwrap();
        let h = fit(&mut m, &data, &splits, &cfg, &aug, None).unwrap();
        (h.to_csv(true), m.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn fit_rejects_bad_setups() {
    let data = small_dataset(3);
    let mut splits = RunSplits::from_dataset(&data);
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let mut base = MilModel::<f32>::new(ModelConfig::baseline(ModelKind::MaxPool, 4, 6, 2), 0).unwrap();
    assert!(fit(&mut base, &data, &splits, &cfg, &AugmentConfig::submix(0.5, 1.0, 0.0), None).is_err());
    let h = fit(&mut base, &data, &splits, &cfg, &AugmentConfig::subsampling(0.5), None).unwrap();
    assert!(h.rows.iter().all(|r| r.entropy_top100.is_none()));
    assert!(!h.to_csv(false).contains("entropy"));
    splits.valid.clear();
    let mut m = init_model::<f32>(2, 2, 8, 6, 2, 0).unwrap();
    assert!(fit(&mut m, &data, &splits, &cfg, &AugmentConfig::none(), None).is_err());
}

#[test]
fn mc_inference_properties() {
    let m = init_model::<f64>(3, 2, 8, 5, 2, 5).unwrap();
    let mut rng = RngStream::new(7, 0);
    let bag = random_bag(&mut rng, 40, 5, 1);
    let full = m.predict(&bag).unwrap().probabilities();
    let one = mc_inference(&m, &bag, 1.0, 1, &mut rng, McAverage::Probabilities).unwrap();
    assert_eq!(one, full);
    for avg in [McAverage::Probabilities, McAverage::Logits] {
        let p = mc_inference(&m, &bag, 0.3, 7, &mut rng, avg).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(mc_inference(&m, &bag, 0.3, 0, &mut rng, McAverage::Probabilities).is_err());

    let spread = |k: usize| {
        let xs: Vec<f64> = (0..50)
            .map(|s| mc_inference(&m, &bag, 0.2, k, &mut RngStream::new(s, k as u64), McAverage::Probabilities).unwrap()[1])
            .collect();
        let mean = xs.iter().sum::<f64>() / 50.0;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 49.0
    };
    assert!(spread(100) < spread(10));
}

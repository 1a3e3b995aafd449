mod common;

use common::{random_images, LinearModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustnet_core::arch::{build_network, robust_resnet, BuiltNetwork, Mode, NetworkSpec, ParamTag};
use robustnet_core::attacks::*;
use robustnet_core::data::{make_synthetic, DatasetHandle, SyntheticConfig};
use robustnet_core::evaluation::evaluate;
use robustnet_core::losses::*;
use robustnet_core::training::*;
use robustnet_core::{Error, Result, Tape, Tensor, Var};

struct Constant(Tensor<f64>);

impl Differentiable<f64> for Constant {
    fn logits_on_tape(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        let k = self.0.numel();
        let rows: Vec<f64> = (0..n).flat_map(|_| self.0.data().to_vec()).collect();
        Ok(tape.constant(Tensor::from_vec(&[n, k], rows).unwrap()))
    }
}

fn value(t: &Tape<f64>, v: Var) -> f64 {
    t.value(v).data()[0]
}

fn clean_ce(model: &dyn Differentiable<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let mut t = Tape::new();
    let z = t.constant(model.logits(x).unwrap());
    let l = cross_entropy(&mut t, z, y).unwrap();
    value(&t, l)
}

fn forward_of<'a>(m: &'a dyn Differentiable<f64>) -> impl FnMut(&mut Tape<f64>, Var) -> Result<Var> + 'a {
    move |t: &mut Tape<f64>, x: Var| m.logits_on_tape(t, x)
}

fn batch(seed: u64) -> (LinearModel<f64>, Tensor<f64>, Vec<usize>) {
    let model = LinearModel::<f64>::random(3, 4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_images(6, 4, &mut rng);
    (model, x, vec![0, 1, 2, 2, 1, 0])
}

#[test]
fn sat_without_radius_is_clean_ce() {
    let (m, x, y) = batch(1);
    let mut t = Tape::new();
    let inner = AttackConfig::pgd(0.0, DEFAULT_ALPHA, 3, true);
    let out = sat_loss(&m, &mut forward_of(&m), &mut t, &x, &y, &inner, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
    assert_eq!(value(&t, out.loss), clean_ce(&m, &x, &y));
}

#[test]
fn confident_constant_network_has_near_zero_sat_loss() {
    let m = Constant(Tensor::from_vec(&[2], vec![60.0, -60.0]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_images(4, 4, &mut rng);
    for eps in [0.0, DEFAULT_EPSILON, 0.3] {
        let mut t = Tape::new();
        let inner = AttackConfig::pgd(eps, DEFAULT_ALPHA, 5, true);
        let out = sat_loss(&m, &mut forward_of(&m), &mut t, &x, &[0; 4], &inner, &mut rng, None).unwrap();
        assert!(value(&t, out.loss) < 1e-40);
    }
}

#[test]
fn sat_matches_hand_wired_attack_then_ce() {
    let (m, x, y) = batch(2);
    let inner = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 4, true);
    let mut t = Tape::new();
    let out = sat_loss(&m, &mut forward_of(&m), &mut t, &x, &y, &inner, &mut ChaCha8Rng::seed_from_u64(7), None).unwrap();
    let adv = pgd(&m, &x, &y, &inner, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(value(&t, out.loss), clean_ce(&m, &adv, &y));
}

#[test]
fn trades_reductions() {
    let (m, x, y) = batch(3);
    let mut t = Tape::new();
    let z = t.constant(m.logits(&x).unwrap());
    let ce = cross_entropy(&mut t, z, &y).unwrap();
    let same = trades_objective(&mut t, z, z, &y, 6.0).unwrap();
    assert!((value(&t, same) - value(&t, ce)).abs() < 1e-9);

    let inner = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 3, true);
    let mut t2 = Tape::new();
    let out = trades_loss(&m, &mut forward_of(&m), &mut t2, &x, &y, 0.0, &inner, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
    assert_eq!(value(&t2, out.loss), clean_ce(&m, &x, &y));
    let mut t3 = Tape::new();
    let out = trades_loss(&m, &mut forward_of(&m), &mut t3, &x, &y, 6.0, &inner, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
    assert!(value(&t3, out.loss) >= clean_ce(&m, &x, &y) - 1e-12);
    let mut t4 = Tape::new();
    let err = trades_loss(&m, &mut forward_of(&m), &mut t4, &x, &y, -1.0, &inner, &mut ChaCha8Rng::seed_from_u64(1), None);
    assert!(matches!(err, Err(Error::Domain(_))));
}

#[test]
fn mart_term_isolation() {
    let (m, x, y) = batch(4);
    let inner = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 3, true);
    let adv = pgd(&m, &x, &y, &inner, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut t = Tape::new();
    let out = mart_loss(&m, &mut forward_of(&m), &mut t, &x, &y, 0.0, &inner, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    // Boosted CE alone: CE(adv) - log(1.0001 - max wrong p_adv).
    let za = m.logits(&adv).unwrap();
    let mut want = clean_ce(&m, &adv, &y);
    for (row, &c) in za.data().chunks(3).zip(&y) {
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let p: Vec<f64> = row.iter().map(|v| (v - mx).exp() / s).collect();
        let wrong = (0..3).filter(|&j| j != c).map(|j| p[j]).fold(f64::MIN, f64::max);
        want -= (1.0001 - wrong + 1e-12).ln() / y.len() as f64;
    }
    assert!((value(&t, out.loss) - want).abs() < 1e-12);
}

#[test]
fn mart_weight_vanishes_when_confident_and_unperturbed() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::from_vec(&[2, 2], vec![40.0, -40.0, -40.0, 40.0]).unwrap());
    let a = mart_objective(&mut t, z, z, &[0, 1], 5.0).unwrap();
    let b = mart_objective(&mut t, z, z, &[0, 1], 0.0).unwrap();
    assert!((value(&t, a) - value(&t, b)).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(-20.0f64..20.0, 4), q in prop::collection::vec(-20.0f64..20.0, 4)) {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(&[1, 4], p).unwrap());
        let b = t.constant(Tensor::from_vec(&[1, 4], q).unwrap());
        let la = t.log_softmax(a).unwrap();
        let lb = t.log_softmax(b).unwrap();
        let kl = kl_rows(&mut t, la, lb).unwrap();
        prop_assert!(value(&t, kl) >= -1e-12);
    }
}

fn tiny() -> (NetworkSpec, DatasetHandle) {
    let spec = robust_resnet([1, 1, 1], [1, 1, 1], 2, 8);
    let data = make_synthetic(&SyntheticConfig::new(2, 8), 48, 32, 11).unwrap();
    (spec, data)
}

fn quick_recipe(loss: LossKind) -> TrainRecipe {
    let mut r = TrainRecipe::baseline(loss, 8);
    r.epochs = 2;
    r.batch_size = 16;
    r.lr_schedule = vec![1];
    r.inner = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 2, true);
    r
}

fn weights(n: &BuiltNetwork<f32>) -> Vec<u32> {
    n.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn training_is_deterministic_for_every_loss() {
    let (spec, data) = tiny();
    for loss in [LossKind::Sat, LossKind::Trades, LossKind::Mart] {
        let r = quick_recipe(loss);
        let a = train(build_network::<f32>(&spec, 5).unwrap(), &r, &data, 9).unwrap();
        let b = train(build_network::<f32>(&spec, 5).unwrap(), &r, &data, 9).unwrap();
        assert_eq!(weights(&a.network), weights(&b.network), "{loss:?}");
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 2);
        assert!((a.metrics[1].lr - 0.01).abs() < 1e-12);
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (spec, data) = tiny();
    let mut r = quick_recipe(LossKind::Trades);
    r.epochs = 3;
    r.ema_decay = Some(0.9);
    r.nesterov = true;
    let full = train(build_network::<f32>(&spec, 1).unwrap(), &r, &data, 4).unwrap();

    let mut first = Trainer::new(build_network::<f32>(&spec, 1).unwrap(), r.clone(), 4).unwrap();
    first.run_epoch(&data).unwrap();
    let ckpt = first.checkpoint();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
    while !resumed.is_finished() {
        resumed.run_epoch(&data).unwrap();
    }
    let out = resumed.finish();
    assert_eq!(out.metrics, full.metrics);
    assert_eq!(weights(&out.network), weights(&full.network));
    assert_eq!(weights(out.ema_network.as_ref().unwrap()), weights(full.ema_network.as_ref().unwrap()));
    assert_eq!(out.checkpoint.ema_network().unwrap().unwrap().buffers(), full.ema_network.unwrap().buffers());
}

#[test]
fn decay_filter_audit() {
    let (spec, _) = tiny();
    let net = build_network::<f64>(&spec, 2).unwrap();
    let mut r = quick_recipe(LossKind::Sat);
    r.weight_decay = 5e-4;
    r.momentum = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grads: Vec<Option<Tensor<f64>>> = net
        .params()
        .iter()
        .map(|p| Some(Tensor::from_vec(p.value.shape(), (0..p.value.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()))
        .collect();
    let (mut on, mut off) = (net.clone(), net.clone());
    r.exclude_norm_affine_from_decay = true;
    let mut sgd_on = Sgd::new(&on, &r);
    r.exclude_norm_affine_from_decay = false;
    let mut sgd_off = Sgd::new(&off, &r);
    for (i, p) in net.params().iter().enumerate() {
        let g = grads[i].as_ref().unwrap();
        let contribution: Vec<f64> =
            sgd_on.regularized_gradient(i, &p.value, g).data().iter().zip(g.data()).map(|(a, b)| a - b).collect();
        if p.tag == ParamTag::NormAffine {
            assert!(contribution.iter().all(|&c| c == 0.0), "{}", p.name);
        } else {
            assert!(contribution.iter().zip(p.value.data()).all(|(&c, &w)| (c - 5e-4 * w).abs() < 1e-15));
        }
    }
    sgd_on.step(&mut on, &grads, 0.1);
    sgd_off.step(&mut off, &grads, 0.1);
    let mut saw_norm = false;
    for ((a, b), w) in on.params().iter().zip(off.params()).zip(net.params()) {
        if a.tag == ParamTag::NormAffine {
            saw_norm = true;
            for ((x, y), w0) in a.value.data().iter().zip(b.value.data()).zip(w.value.data()) {
                assert!((x - y - 0.1 * 5e-4 * w0).abs() < 1e-15);
            }
        } else {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
    assert!(saw_norm);
}

#[test]
fn sgd_matches_reference_update() {
    // Two steps of heavy-ball and Nesterov momentum on one scalar.
    let (spec, _) = tiny();
    let net = build_network::<f64>(&spec, 0).unwrap();
    for nesterov in [false, true] {
        let mut r = quick_recipe(LossKind::Sat);
        r.nesterov = nesterov;
        r.weight_decay = 0.1;
        let mut n = net.clone();
        let mut sgd = Sgd::new(&n, &r);
        let grads: Vec<Option<Tensor<f64>>> = n.params().iter().map(|p| Some(Tensor::full(p.value.shape(), 1.0))).collect();
        let w0 = n.params()[0].value.data()[0];
        sgd.step(&mut n, &grads, 0.5);
        sgd.step(&mut n, &grads, 0.5);
        let (mut w, mut buf) = (w0, 0.0);
        for step in 0..2 {
            let g = 1.0 + 0.1 * w;
            buf = if step == 0 { g } else { 0.9 * buf + g };
            w -= 0.5 * if nesterov { g + 0.9 * buf } else { buf };
        }
        assert!((n.params()[0].value.data()[0] - w).abs() < 1e-14);
    }
}

#[test]
fn ema_is_convex_and_converges_geometrically() {
    let (spec, _) = tiny();
    let net = build_network::<f64>(&spec, 0).unwrap();
    let mut observed = net.clone();
    let mut ema = Ema::new(&net, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut lo, mut hi) = (net.params()[0].value.data()[0], net.params()[0].value.data()[0]);
    for _ in 0..20 {
        let v = rng.gen_range(-3.0..3.0);
        observed.params_mut()[0].value.data_mut()[0] = v;
        lo = lo.min(v);
        hi = hi.max(v);
        ema.update(&observed);
        let s = ema.params[0].data()[0];
        assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
    }
    let target = 1.5;
    observed.params_mut()[0].value.data_mut()[0] = target;
    let gap0 = ema.params[0].data()[0] - target;
    for t in 1..=30 {
        ema.update(&observed);
        let want = gap0 * 0.8f64.powi(t);
        assert!((ema.params[0].data()[0] - target - want).abs() < 1e-12);
    }
}

#[test]
fn nan_loss_aborts_with_position() {
    let (spec, data) = tiny();
    let mut net = build_network::<f32>(&spec, 0).unwrap();
    let last = net.params().len() - 1;
    net.params_mut()[last].value.data_mut()[0] = f32::NAN;
    let mut r = quick_recipe(LossKind::Sat);
    r.inner.epsilon = 0.0;
    match train(net, &r, &data, 0) {
        Err(Error::Diverged { epoch: 0, step: 0, loss }) => assert!(loss.is_nan()),
        other => panic!("expected divergence, got {:?}", other.err()),
    }
}

#[test]
fn resolution_mismatch_is_rejected() {
    let (_, data) = tiny();
    let spec = robust_resnet([1, 1, 1], [1, 1, 1], 2, 16);
    let r = quick_recipe(LossKind::Sat);
    assert!(matches!(train(build_network::<f32>(&spec, 0).unwrap(), &r, &data, 0), Err(Error::Shape { .. })));
}

#[test]
fn optional_augmentations_train() {
    let (spec, data) = tiny();
    let mut r = quick_recipe(LossKind::Trades);
    r.epochs = 1;
    r.label_smoothing = 0.1;
    r.cutmix_alpha = Some(1.0);
    let out = train(build_network::<f32>(&spec, 0).unwrap(), &r, &data, 0).unwrap();
    assert!(out.metrics[0].loss.is_finite());
    r.loss = LossKind::Mart;
    assert!(matches!(r.validate(), Err(Error::InvalidSpec(_))));
}

#[test]
fn single_value_sweep_equals_train() {
    let (spec, data) = tiny();
    let mut r = quick_recipe(LossKind::Sat);
    r.epochs = 1;
    let attacks = [AttackConfig::fgsm(DEFAULT_EPSILON)];
    let setup = SweepSetup { spec: &spec, dataset: &data, eval_attacks: &attacks, eval_batch: 16, seed: 3 };
    let runs = weight_decay_sweep::<f32>(&setup, &r, &[5e-4], &[spec.stages[0].block_template.activation]).unwrap();
    assert_eq!(runs.len(), 1);
    let mut manual = r.clone();
    manual.weight_decay = 5e-4;
    let mut sp = spec.clone();
    sp.name = runs[0].record.spec_id.clone();
    let out = train(build_network::<f32>(&sp, 3).unwrap(), &manual, &data, 3).unwrap();
    assert_eq!(out.metrics, runs[0].metrics);
    let acc = evaluate(&out.network, &data.test, &attacks, 16, &mut epoch_rng(3, usize::MAX - 1)).unwrap();
    assert_eq!(acc.clean_acc, runs[0].record.clean_acc);
    assert_eq!(acc.robust_acc, runs[0].record.robust_acc);
    assert!(weight_decay_sweep::<f32>(&setup, &r, &[], &[spec.stages[0].block_template.activation]).is_err());
}

#[test]
fn default_sweep_values() {
    assert_eq!(DEFAULT_WEIGHT_DECAYS, [1e-4, 2e-4, 5e-4]);
}

#[test]
fn eval_mode_forward_is_pure_during_training_attacks() {
    let (spec, data) = tiny();
    let net = build_network::<f32>(&spec, 0).unwrap();
    let before = net.buffers().to_vec();
    let x = data.train.gather::<f32>(&[0, 1, 2]).x;
    let _ = pgd(&net, &x, &[0, 1, 0], &AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 3, true), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(net.buffers(), &before[..]);
    let mut n2 = net.clone();
    n2.forward(&x, Mode::Train).unwrap();
    assert_ne!(n2.buffers(), &before[..]);
}

use robustnet_core::arch::robust_resnet;
use robustnet_core::attacks::{AttackConfig, DEFAULT_ALPHA, DEFAULT_EPSILON};
use robustnet_core::data::{make_synthetic, Split, SyntheticConfig};
use robustnet_core::evaluation::{derive_stage_ratios, evaluate, RobustRunRecord};
use robustnet_core::losses::LossKind;
use robustnet_core::scaling::Axis;
use robustnet_core::training::{epoch_rng, train, TrainRecipe};

#[test]
fn two_class_set_is_balanced_and_reproducible() {
    let cfg = SyntheticConfig::new(2, 32);
    let a = make_synthetic(&cfg, 2000, 10, 0).unwrap();
    assert_eq!(a.train.len(), 2000);
    assert_eq!(a.train.labels.iter().filter(|&&l| l == 0).count(), 1000);
    assert!(a.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(make_synthetic(&cfg, 2000, 10, 0).unwrap(), a);
    assert_ne!(make_synthetic(&cfg, 2000, 10, 1).unwrap().train, a.train);
}

/// Full-batch logistic regression on raw pixels; returns training accuracy.
fn linear_probe(split: &Split, iters: usize) -> f64 {
    let p = split.image(0).len();
    let xs: Vec<&[f32]> = (0..split.len()).map(|i| split.image(i)).collect();
    let ys: Vec<f64> = split.labels.iter().map(|&l| l as f64).collect();
    let mean: Vec<f64> = (0..p).map(|j| xs.iter().map(|x| x[j] as f64).sum::<f64>() / xs.len() as f64).collect();
    let (mut w, mut b) = (vec![0.0f64; p], 0.0f64);
    let lr = 0.5 / p as f64;
    for _ in 0..iters {
        let mut gw = vec![0.0f64; p];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let z: f64 = b + x.iter().zip(&w).zip(&mean).map(|((&v, &wj), &m)| (v as f64 - m) * wj).sum::<f64>();
            let e = 1.0 / (1.0 + (-z).exp()) - y;
            for ((g, &v), &m) in gw.iter_mut().zip(x.iter()).zip(&mean) {
                *g += e * (v as f64 - m);
            }
            gb += e;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= lr * g;
        }
        b -= 0.5 * gb / xs.len() as f64;
    }
    let correct = xs
        .iter()
        .zip(&ys)
        .filter(|(x, &y)| {
            let z: f64 = b + x.iter().zip(&w).zip(&mean).map(|((&v, &wj), &m)| (v as f64 - m) * wj).sum::<f64>();
            (z > 0.0) == (y > 0.5)
        })
        .count();
    100.0 * correct as f64 / xs.len() as f64
}

#[test]
fn large_margin_is_linearly_separable() {
    let mut cfg = SyntheticConfig::new(2, 32);
    cfg.margin = 2.0;
    let ds = make_synthetic(&cfg, 2000, 10, 0).unwrap();
    assert_eq!(linear_probe(&ds.train, 300), 100.0);
}

/// Scaled-down depth-distribution experiment over all 27 triples in
/// {1, 2, 3}^3. Takes several minutes; run with `--ignored`.
#[test]
#[ignore]
fn top_depth_triples_favour_early_stages() {
    let data = make_synthetic(&SyntheticConfig::new(2, 8), 256, 256, 0).unwrap();
    let mut recs = Vec::new();
    for i in 0..27 {
        let d = [i / 9 + 1, i / 3 % 3 + 1, i % 3 + 1];
        let spec = robust_resnet(d, [1, 1, 1], 2, 8);
        let mut r = TrainRecipe::baseline(LossKind::Sat, 8);
        r.epochs = 4;
        r.batch_size = 32;
        r.lr_schedule = vec![];
        r.augment = false;
        r.inner = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 2, true);
        let out = train(robustnet_core::arch::build_network::<f32>(&spec, 0).unwrap(), &r, &data, 0).unwrap();
        let eval = [AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 10, true)];
        let acc = evaluate(&out.network, &data.test, &eval, 128, &mut epoch_rng(0, 99)).unwrap();
        recs.push(RobustRunRecord::for_spec(&spec, "grid", 0, &acc).unwrap());
    }
    let ratio = derive_stage_ratios(&recs, Axis::Depth, "pgd10", 5).unwrap();
    assert!((ratio[0] + ratio[1]) / 2.0 >= ratio[2], "{ratio:?}");
}

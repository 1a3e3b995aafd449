//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Exits 0 whatever the verdicts, so the workspace test run stays green with
//! known failures on record. Set `ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.
//! Criterion 8 needs CIFAR-10 under `ROBUSTNET_DATA` and
//! `ACCEPTANCE_FULL=1`; it is skipped otherwise.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use robustnet::config::DatasetConfig;
use robustnet_core::arch::*;
use robustnet_core::attacks::*;
use robustnet_core::complexity::{count_flops, count_params};
use robustnet_core::data::{make_synthetic, DatasetHandle, SplitKind, SyntheticConfig};
use robustnet_core::evaluation::*;
use robustnet_core::losses::{mart_loss, trades_loss, trades_objective, LossKind};
use robustnet_core::scaling::{solve_compound, BlockKind};
use robustnet_core::training::{epoch_rng, train, ChaCha8Rng, TrainRecipe};
use robustnet_core::{Activation, Result, Scalar, Tape, Tensor, Var};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `logits = W * x + b` over flattened images.
struct Linear<T> {
    w: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn random(classes: usize, res: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let w = (0..classes * 3 * res * res).map(|_| T::c(r.gen_range(-1.0..1.0))).collect();
        let b = (0..classes).map(|_| T::c(r.gen_range(-0.5..0.5))).collect();
        Self { w: Tensor::from_vec(&[classes, 3, res, res], w).unwrap(), b: Tensor::from_vec(&[classes, 1], b).unwrap() }
    }
}

impl<T: Scalar> Differentiable<T> for Linear<T> {
    fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.constant(self.w.clone());
        let z = tape.conv2d(x, w, 1, 0, 1)?;
        let z = tape.global_avg_pool(z)?;
        let b = tape.constant(self.b.clone());
        let n = tape.value(z).shape()[0];
        let ones = tape.constant(Tensor::full(&[n, 1], T::one()));
        let bias = tape.linear(ones, b, None)?;
        tape.add(z, bias)
    }
}

fn images<T: Scalar>(n: usize, res: usize, r: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_vec(&[n, 3, res, res], (0..n * 3 * res * res).map(|_| T::c(r.gen_range(0.0..=1.0))).collect()).unwrap()
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    ((got - want) / want).abs() <= tol
}

fn c1_complexity() -> Verdict {
    let t = Instant::now();
    let models = [
        ("WRN-28-10", wrn(28, 10, 10).unwrap(), 36.5e6, 5.20e9),
        ("WRN-70-16", wrn(70, 16, 10).unwrap(), 267e6, 38.8e9),
        ("A1", robust_resnet(Preset::A1.depths(), Preset::A1.widths(), 10, 32), 19.2e6, 5.11e9),
        ("A4", robust_resnet(Preset::A4.depths(), Preset::A4.widths(), 10, 32), 147e6, 39.4e9),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, spec, p, f) in models {
        let gp = count_params(&spec).unwrap() as f64;
        let gf = count_flops(&spec, 32).unwrap() as f64;
        ok &= within(gp, p, 0.02) && within(gf, f, 0.02);
        parts.push(format!("{name} {:.2}M/{:.3}G", gp / 1e6, gf / 1e9));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(ok && secs < 1.0, format!("{} within 2% ({secs:.3} s)", parts.join(", ")))
}

fn c2_scaling() -> Verdict {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for p in Preset::ALL {
        let s = solve_compound(p.budget_gflops() * 1_000_000_000, BlockKind::Robust, 32).unwrap();
        let hit = s.depths == p.depths() && s.widths == p.widths();
        ok &= hit;
        parts.push(format!(
            "{}G {}{:?}/{:?}{}",
            p.budget_gflops(),
            if hit { "" } else { "got " },
            s.depths,
            s.widths,
            if hit { String::new() } else { format!(" want {:?}/{:?}", p.depths(), p.widths()) }
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(ok && secs < 10.0, format!("{} ({secs:.2} s)", parts.join("; ")))
}

fn c3_attacks() -> Verdict {
    let mut feasible = true;
    let mut r = rng(3);
    for case in 0..10_000u64 {
        let model = Linear::<f32>::random(3, 2, case);
        let x = images::<f32>(2, 2, &mut r);
        let eps = r.gen_range(0.0..0.3);
        let alpha = r.gen_range(0.0..0.2);
        let steps = r.gen_range(1..5);
        let cfg = match case % 3 {
            0 => AttackConfig::fgsm(eps),
            1 => AttackConfig::pgd(eps, alpha, steps, r.gen()),
            _ => AttackConfig { alpha, ..AttackConfig::cw(eps, steps) },
        };
        let y = [r.gen_range(0..3), r.gen_range(0..3)];
        let adv = run_attack(&model, &x, &y, &cfg, &mut r).unwrap();
        let bound = eps as f32 * (1.0 + f32::EPSILON) + f32::EPSILON * 0.5;
        let dist = adv.data().iter().zip(x.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        feasible &= dist <= bound && adv.data().iter().all(|v| (0.0..=1.0).contains(v));
    }
    let mut identical = true;
    for case in 0..10_000u64 {
        let model = Linear::<f32>::random(4, 3, case);
        let x = images::<f32>(3, 3, &mut r);
        let eps = r.gen_range(0.0..0.3);
        let a = fgsm(&model, &x, &[0, 1, 3], &AttackConfig::fgsm(eps)).unwrap();
        let b = pgd(&model, &x, &[0, 1, 3], &AttackConfig::pgd(eps, eps, 1, false), &mut r).unwrap();
        identical &= a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    let net = build_network::<f64>(&robust_resnet([1, 1, 1], [1, 1, 1], 3, 8), 4).unwrap();
    let x = images::<f64>(2, 8, &mut rng(2));
    let y = [0usize, 2];
    let mut worst = 0.0f64;
    for kind in [AttackLoss::CrossEntropy, AttackLoss::CwMargin, AttackLoss::Kl] {
        let clean = clean_log_probs(&net, &x.map(|v| (v * 0.9 + 0.03).min(1.0))).unwrap();
        let mut obj = objective_for(kind, y.to_vec(), Some(clean));
        let g = input_gradient(&net, &x, &y, &mut obj).unwrap();
        let mut f = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let z = net.logits_on_tape(&mut tape, xv).unwrap();
            let l = obj(&mut tape, z).unwrap();
            tape.value(l).data()[0]
        };
        let h = 1e-5;
        for i in (0..x.numel()).step_by(23) {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = g.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
    }
    verdict(
        feasible && identical && worst < 1e-3,
        format!("feasible on 1e4: {feasible}; FGSM == PGD-1 bitwise on 1e4: {identical}; worst FD rel. error {worst:.2e}"),
    )
}

fn scalar(t: &Tape<f64>, v: Var) -> f64 {
    t.value(v).data()[0]
}

fn c4_losses() -> Verdict {
    let m = Linear::<f64>::random(3, 4, 9);
    let mut r = rng(4);
    let x = images::<f64>(6, 4, &mut r);
    let y = [0, 1, 2, 0, 1, 2];
    let logits = m.logits(&x).unwrap();
    let ce_of = |z: &Tensor<f64>| {
        let mut t = Tape::new();
        let v = t.constant(z.clone());
        let l = cross_entropy(&mut t, v, &y).unwrap();
        scalar(&t, l)
    };
    let mut t = Tape::new();
    let z = t.constant(logits.clone());
    let same = trades_objective(&mut t, z, z, &y, 6.0).unwrap();
    let degenerate = (scalar(&t, same) - ce_of(&logits)).abs();

    let inner = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 3, true);
    let mut fwd = |tape: &mut Tape<f64>, x: Var| m.logits_on_tape(tape, x);
    let mut t2 = Tape::new();
    let out = trades_loss(&m, &mut fwd, &mut t2, &x, &y, 0.0, &inner, &mut rng(1), None).unwrap();
    let gamma0 = (scalar(&t2, out.loss) - ce_of(&logits)).abs();

    let adv = pgd(&m, &x, &y, &inner, &mut rng(5)).unwrap();
    let mut t3 = Tape::new();
    let out = mart_loss(&m, &mut fwd, &mut t3, &x, &y, 0.0, &inner, &mut rng(5)).unwrap();
    let za = m.logits(&adv).unwrap();
    let mut want = ce_of(&za);
    for (row, &c) in za.data().chunks(3).zip(&y) {
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let wrong = (0..3).filter(|&j| j != c).map(|j| (row[j] - mx).exp() / s).fold(f64::MIN, f64::max);
        want -= (1.0001 - wrong + 1e-12).ln() / y.len() as f64;
    }
    let lambda0 = (scalar(&t3, out.loss) - want).abs();

    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let mut t = Tape::new();
        let p: Vec<f64> = (0..4).map(|_| r.gen_range(-20.0..20.0)).collect();
        let q: Vec<f64> = (0..4).map(|_| r.gen_range(-20.0..20.0)).collect();
        let a = t.constant(Tensor::from_vec(&[1, 4], p).unwrap());
        let b = t.constant(Tensor::from_vec(&[1, 4], q).unwrap());
        let la = t.log_softmax(a).unwrap();
        let lb = t.log_softmax(b).unwrap();
        let kl = kl_rows(&mut t, la, lb).unwrap();
        min_kl = min_kl.min(scalar(&t, kl));
    }
    verdict(
        degenerate < 1e-9 && gamma0 < 1e-9 && lambda0 < 1e-9 && min_kl >= -1e-12,
        format!("identical logits |Δ|={degenerate:.1e}; γ=0 |Δ|={gamma0:.1e}; λ=0 |Δ|={lambda0:.1e}; min KL over 1e4 = {min_kl:.2e}"),
    )
}

/// Eval-mode norm + ReLU from a network's stored statistics.
fn bn_relu(net: &BuiltNetwork<f32>, x: &Tensor<f32>, pre: &str) -> Tensor<f32> {
    let p = |n: &str| &net.params().iter().find(|p| p.name == n).unwrap().value;
    let b = |n: &str| &net.buffers().iter().find(|p| p.name == n).unwrap().value;
    let (g, be) = (p(&format!("{pre}.weight")), p(&format!("{pre}.bias")));
    let (m, v) = (b(&format!("{pre}.running_mean")), b(&format!("{pre}.running_var")));
    let (_, c, h, w) = x.dims4().unwrap();
    let mut y = x.clone();
    for (i, o) in y.data_mut().iter_mut().enumerate() {
        let ch = (i / (h * w)) % c;
        *o = ((*o - m.data()[ch]) / (v.data()[ch] + 1e-5).sqrt() * g.data()[ch] + be.data()[ch]).max(0.0);
    }
    y
}

fn plain_conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize) -> Tensor<f32> {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.conv2d(xv, wv, stride, w.shape()[2] / 2, 1).unwrap();
    t.value(y).clone()
}

/// Bottleneck network evaluated as a chain of ordinary convolutions.
fn plain_forward(net: &BuiltNetwork<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let p = |n: &str| net.params().iter().find(|p| p.name == n).unwrap().value.clone();
    let mut h = plain_conv(x, &p("stem.conv.weight"), 1);
    for pb in net.spec().blocks() {
        let name = format!("s{}.b{}", pb.stage + 1, pb.index + 1);
        let o = bn_relu(net, &h, &format!("{name}.n1"));
        let sc = if pb.spec.has_projection() { plain_conv(&o, &p(&format!("{name}.proj.weight")), pb.spec.stride) } else { h.clone() };
        let mut r = plain_conv(&o, &p(&format!("{name}.conv1.weight")), 1);
        r = plain_conv(&bn_relu(net, &r, &format!("{name}.n2")), &p(&format!("{name}.conv2.weight")), pb.spec.stride);
        r = plain_conv(&bn_relu(net, &r, &format!("{name}.n3")), &p(&format!("{name}.conv3.weight")), 1);
        h = sc;
        h.add_assign(&r);
    }
    let h = bn_relu(net, &h, "head.norm");
    let (n, c, hh, ww) = h.dims4().unwrap();
    let (fw, fb) = (p("head.fc.weight"), p("head.fc.bias"));
    let k = fb.numel();
    let mut out = Tensor::zeros(&[n, k]);
    for i in 0..n {
        for j in 0..k {
            let mut acc = fb.data()[j];
            for ch in 0..c {
                acc += h.data()[(i * c + ch) * hh * ww..][..hh * ww].iter().sum::<f32>() / (hh * ww) as f32 * fw.data()[j * c + ch];
            }
            out.data_mut()[i * k + j] = acc;
        }
    }
    out
}

fn c5_structure() -> Verdict {
    let mut t = robust_template();
    t.scales = 1;
    t.cardinality = 1;
    t.se_variant = SeVariant::None;
    let net = build_network::<f32>(&NetworkSpec::from_template("plain", t, [1, 1, 1], [1, 1, 1], 3, 8), 11).unwrap();
    let x = images::<f32>(4, 8, &mut rng(7));
    let got = net.predict(&x).unwrap();
    let want = plain_forward(&net, &x);
    let plain_err = got.data().iter().zip(want.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs() / (1.0 + b.abs())));

    let xs = images::<f64>(2, 4, &mut rng(3)).reshape(&[2, 8, 2, 3]).unwrap();
    let se = |variant: SeVariant, bias: f64| {
        let mut t = Tape::new();
        let xv = t.constant(xs.clone());
        let params = [
            t.constant(Tensor::full(&[2, 8], 0.3)),
            t.constant(Tensor::zeros(&[2])),
            t.constant(Tensor::zeros(&[8, 2])),
            t.constant(Tensor::full(&[8], bias)),
        ];
        let y = apply_se(&mut t, variant, xv, params, Activation::Relu).unwrap();
        t.value(y).clone()
    };
    let gates = se(SeVariant::Residual, f64::NEG_INFINITY) == xs
        && se(SeVariant::Residual, f64::INFINITY) == xs.map(|v| 2.0 * v)
        && se(SeVariant::Standard, f64::NEG_INFINITY).data().iter().all(|&v| v == 0.0);

    let mut counts = true;
    for tpl in [robust_template(), wrn_template(ActivationOrder::Pre)] {
        let mut post = tpl.clone();
        post.activation_order = ActivationOrder::Post;
        let a = NetworkSpec::from_template("a", tpl, [2, 1, 2], [2, 3, 1], 10, 16);
        let b = NetworkSpec::from_template("b", post, [2, 1, 2], [2, 3, 1], 10, 16);
        counts &= count_params(&a).unwrap() == count_params(&b).unwrap();
    }

    let mut identity = true;
    for tpl in [robust_template(), wrn_template(ActivationOrder::Pre)] {
        for variant in [SeVariant::None, SeVariant::Standard, SeVariant::Residual, SeVariant::Pre, SeVariant::Conv3x3] {
            let mut t = tpl.clone();
            t.se_variant = variant;
            let spec = NetworkSpec::from_template("z", t, [2, 2, 2], [1, 1, 1], 4, 8);
            let mut net = build_network::<f64>(&spec, 5).unwrap();
            for p in net.params_mut() {
                if p.tag != ParamTag::NormAffine && !p.name.starts_with("stem") {
                    p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let mut tape = Tape::new();
            let params = net.bind(&mut tape, false);
            let x = tape.constant(images::<f64>(3, 8, &mut rng(6)));
            let out = net.forward_tape(&mut tape, &params, x, Mode::Eval).unwrap();
            for (i, b) in spec.blocks().iter().enumerate() {
                if !b.spec.has_projection() {
                    identity &= tape.value(out.features[i + 1]) == tape.value(out.features[i]);
                }
            }
        }
    }
    verdict(
        plain_err < 1e-6 && gates && counts && identity,
        format!("plain-path max rel. error {plain_err:.1e}; SE gate identities: {gates}; pre/post counts equal: {counts}; zero-weight identities: {identity}"),
    )
}

fn robust_rate(net: &BuiltNetwork<f32>, data: &DatasetHandle, seed: u64) -> f64 {
    let atk = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 10, true);
    evaluate(net, data.split(SplitKind::Test), &[atk], 128, &mut epoch_rng(seed, 999)).unwrap().robust_acc["pgd10"]
}

fn c6_desk_at() -> Verdict {
    let t = Instant::now();
    let spec = robust_resnet([2, 2, 1], [1, 1, 1], 2, 8);
    let mut gaps = Vec::new();
    for seed in 0..3u64 {
        let data = make_synthetic(&SyntheticConfig::new(2, 8), 512, 256, seed).unwrap();
        let mut recipe = TrainRecipe::baseline(LossKind::Sat, 8);
        recipe.epochs = 10;
        recipe.batch_size = 64;
        recipe.lr_schedule = vec![];
        recipe.augment = false;
        recipe.inner = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 3, true);
        let mut erm = recipe.clone();
        erm.inner.epsilon = 0.0;
        let at = train(build_network::<f32>(&spec, seed).unwrap(), &recipe, &data, seed).unwrap().network;
        let st = train(build_network::<f32>(&spec, seed).unwrap(), &erm, &data, seed).unwrap().network;
        gaps.push(robust_rate(&at, &data, seed) - robust_rate(&st, &data, seed));
    }
    let secs = t.elapsed().as_secs_f64();
    let gap_txt: Vec<String> = gaps.iter().map(|g| format!("{g:.1}")).collect();
    verdict(
        gaps.iter().all(|&g| g >= 20.0) && secs < 600.0,
        format!("PGD-10 advantage per seed [{}] points, need >= 20 ({secs:.0} s)", gap_txt.join(", ")),
    )
}

fn c7_analysis() -> Verdict {
    fn tau_oracle(x: &[f64], y: &[f64]) -> f64 {
        let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let (a, b) = ((x[i] - x[j]).partial_cmp(&0.0).unwrap() as i8, (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i8);
                match (a == 0, b == 0) {
                    (true, true) => {
                        tx += 1;
                        ty += 1;
                    }
                    (true, false) => tx += 1,
                    (false, true) => ty += 1,
                    _ if a == b => c += 1,
                    _ => d += 1,
                }
            }
        }
        let n0 = (x.len() * (x.len() - 1) / 2) as i64;
        (c - d) as f64 / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt()
    }
    let mut r = rng(7);
    let mut tau_ok = true;
    for _ in 0..100 {
        let n = r.gen_range(2..=200);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut y = x.clone();
        y.shuffle(&mut r);
        tau_ok &= kendall_tau(&x, &y).unwrap() == tau_oracle(&x, &y);
    }
    let mut pareto_ok = true;
    for _ in 0..200 {
        let n = r.gen_range(1..60);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (r.gen_range(0..20) as f64, r.gen_range(0..20) as f64)).collect();
        let labels = pareto_labels(&pts);
        for (i, &p) in pts.iter().enumerate() {
            let dominated = pts.iter().any(|&q| q.0 <= p.0 && q.1 >= p.1 && (q.0 < p.0 || q.1 > p.1));
            pareto_ok &= (labels[i] == ParetoLabel::Efficient) == !dominated;
        }
    }
    let mut agg_ok = true;
    for _ in 0..200 {
        let n = r.gen_range(1..30);
        let vals: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..100.0)).collect();
        let recs: Vec<RobustRunRecord> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| RobustRunRecord {
                spec_id: "s".into(),
                recipe_id: "r".into(),
                seed: i as u64,
                clean_acc: v,
                robust_acc: BTreeMap::from([("pgd20".to_string(), 100.0 - v)]),
                params: 1,
                flops: 1,
                wall_time: 0.0,
                depths: [1, 1, 1],
                widths: [1, 1, 1],
            })
            .collect();
        let a = &aggregate_seeds(&recs).unwrap()[0];
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        agg_ok &= (a.metrics["clean_acc"].mean - mean).abs() < 1e-9 && (a.metrics["pgd20"].std - sd).abs() < 1e-9;
    }
    verdict(tau_ok && pareto_ok && agg_ok, format!("tau exact on 100 permutations: {tau_ok}; Pareto vs dominance oracle: {pareto_ok}; aggregate vs two-pass: {agg_ok}"))
}

/// Basic-block network within 5% of `target` FLOPs, keeping `widths` and
/// preferring the most even depths, then the closest cost.
fn matched_basic(target: u64, widths: [usize; 3]) -> Option<(NetworkSpec, u64)> {
    let mut best: Option<((usize, u64), NetworkSpec, u64)> = None;
    for i in 0..8 * 8 * 8 {
        let d = [i / 64 + 1, i / 8 % 8 + 1, i % 8 + 1];
        let name = format!("basic-D{}-{}-{}-W{}-{}-{}", d[0], d[1], d[2], widths[0], widths[1], widths[2]);
        let s = NetworkSpec::from_template(name, BlockKind::Basic.template(), d, widths, 10, 32);
        let f = count_flops(&s, 32).unwrap();
        let key = (d.iter().max().unwrap() - d.iter().min().unwrap(), f.abs_diff(target));
        if within(f as f64, target as f64, 0.05) && best.as_ref().map_or(true, |b| key < b.0) {
            best = Some((key, s, f));
        }
    }
    best.map(|(_, s, f)| (s, f))
}

fn c8_topology() -> Verdict {
    let robust = robust_resnet([2; 3], [2; 3], 10, 32);
    let rf = count_flops(&robust, 32).unwrap();
    let Some((basic, bf)) = matched_basic(rf, [2; 3]) else {
        return Verdict::Fail(format!("no basic-block model within 5% of {rf} FLOPs"));
    };
    let matched = format!("{} at {bf} FLOPs vs {rf} ({:+.1}%)", basic.name, (bf as f64 / rf as f64 - 1.0) * 100.0);
    let root = std::env::var_os(robustnet::config::DATA_ENV);
    if root.is_none() || std::env::var("ACCEPTANCE_FULL").as_deref() != Ok("1") {
        return Verdict::Skip(format!("needs CIFAR-10 under ${} and ACCEPTANCE_FULL=1 (hours of compute); matched {matched}", robustnet::config::DATA_ENV));
    }
    let data = match (DatasetConfig::Cifar { variant: robustnet::cifar::CifarVariant::C10, root: None, train_limit: None, test_limit: None }).load() {
        Ok(d) => d,
        Err(e) => return Verdict::Fail(format!("could not load CIFAR-10: {e}")),
    };
    let mut recipe = TrainRecipe::baseline(LossKind::Sat, 32);
    recipe.epochs = 20;
    recipe.lr_schedule = vec![15, 18];
    recipe.inner = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 5, true);
    let mut acc = [0.0f64; 2];
    for seed in 0..2u64 {
        for (i, spec) in [&robust, &basic].into_iter().enumerate() {
            let net = train(build_network::<f32>(spec, seed).unwrap(), &recipe, &data, seed).unwrap().network;
            acc[i] += robust_rate(&net, &data, seed) / 2.0;
        }
    }
    let gap = acc[0] - acc[1];
    verdict(gap >= -0.5, format!("robust {:.2} vs basic {:.2}, gap {gap:.2} >= -0.5; matched {matched}", acc[0], acc[1]))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("complexity calibration", c1_complexity),
        ("scaling reproduction", c2_scaling),
        ("attack suite", c3_attacks),
        ("loss degeneracies", c4_losses),
        ("structural equivalences", c5_structure),
        ("desk-scale AT efficacy", c6_desk_at),
        ("analysis oracles", c7_analysis),
        ("topology ablation direction", c8_topology),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let (mut pass, mut fail, mut skip) = (0, 0, 0);
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let (tag, detail) = match run() {
            Verdict::Pass(d) => {
                pass += 1;
                ("PASS", d)
            }
            Verdict::Fail(d) => {
                fail += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => {
                skip += 1;
                ("SKIP", d)
            }
        };
        println!("{tag} [{}] {name}: {detail}", i + 1);
    }
    println!("acceptance: {pass} passed, {fail} failed, {skip} skipped");
    if fail > 0 && std::env::var("ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}

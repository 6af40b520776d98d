mod common;

use common::*;
use niff_core::losses::{
    compute_fisher, conf_loss, ewc_penalty, kd_loss, kl_gaussian_diag, novel_loss, supervised_terms, FisherInfo,
    FisherLayer, FisherMode, GeneratorObjective, LossSwitches, KL_EPS,
};
use niff_core::models::{sample_noise, HeadModel, Parameterized};
use niff_core::NiffError;
use niff_tensor::gradcheck::{check_gradients, numeric_gradient};
use niff_tensor::Tensor;
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn student_of(t: &HeadModel, seed: u64) -> HeadModel {
    HeadModel::clone_student(t, 2, &mut rng(seed)).unwrap()
}

#[test]
fn kd_loss_is_zero_for_an_untouched_clone() {
    let t = teacher(1);
    let s = student_of(&t, 2);
    let f = forged(&[0, 1, 2, 2], &mut rng(3));
    let v = kd_loss(&t, &s, &f, 0.1).unwrap();
    assert_eq!(v.total.item().unwrap(), 0.0);
    assert_eq!(v.breakdown.total, 0.0);
}

#[test]
fn kd_loss_is_positive_after_perturbation_and_matches_finite_differences() {
    let t = teacher(4);
    let s = perturb(&student_of(&t, 5), 0.05, &mut rng(6));
    let f = forged(&[0, 1, 2, 0, 1], &mut rng(7));
    assert!(kd_loss(&t, &s, &f, 0.1).unwrap().total.item().unwrap() > 0.0);
    // Conv parameters feed all three terms; a large λ_F makes the feature terms count.
    let conv = param_values(&s)[..4].to_vec();
    let rest = param_values(&s)[4..].to_vec();
    let report = check_gradients(
        |xs| {
            let mut all = xs.to_vec();
            all.extend(rest.iter().cloned());
            Ok(kd_loss(&t, &with_params(&s, &all), &f, 10.0).unwrap().total)
        },
        &conv,
        STEP,
    )
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
    // With λ_F = 0 the weight rows do not enter, so every parameter can be probed.
    let report = check_gradients(
        |xs| Ok(kd_loss(&t, &with_params(&s, xs), &f, 0.0).unwrap().total),
        &param_values(&s),
        STEP,
    )
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn zero_classifier_row_removes_its_class_from_term_one() {
    let t = teacher(8);
    let mut s = perturb(&student_of(&t, 9), 0.05, &mut rng(10));
    let d = s.feature_dim();
    let mut w = s.cls.base_weight.to_vec();
    w[d..2 * d].iter_mut().for_each(|v| *v = 0.0);
    s.cls.base_weight = Tensor::new(s.cls.base_weight.shape().to_vec(), w).unwrap();
    let only_class_1 = forged(&[1, 1, 1], &mut rng(11));
    let v = kd_loss(&t, &s, &only_class_1, 0.1).unwrap();
    assert_eq!(v.breakdown.cls_feat_term, 0.0);
    assert!(v.breakdown.reg_feat_term > 0.0);
}

#[test]
fn novel_label_in_forged_batch_is_rejected() {
    let t = teacher(12);
    let s = student_of(&t, 13);
    let f = forged(&[0, 3], &mut rng(14));
    assert!(matches!(kd_loss(&t, &s, &f, 0.1), Err(NiffError::Contract(_))));
    assert!(matches!(conf_loss(&s, &f), Err(NiffError::Contract(_))));
}

#[test]
fn conf_loss_extremes() {
    let t = teacher(15);
    let mut s = student_of(&t, 16);
    // All-zero classifier: uniform over |C| = 5 classes.
    s.cls.base_weight = Tensor::zeros(s.cls.base_weight.shape().to_vec());
    let f = forged(&[0, 1, 2], &mut rng(17));
    let v = conf_loss(&s, &f).unwrap().item().unwrap();
    assert!((v - 5f64.ln()).abs() < 1e-12);
    // A huge bias on the right class: one-hot prediction.
    let mut b = vec![0.0; 3];
    b[2] = 1e4;
    s.cls.base_bias = Tensor::new(vec![3], b).unwrap();
    let v = conf_loss(&s, &forged(&[2, 2], &mut rng(18))).unwrap().item().unwrap();
    assert!(v.abs() < 1e-12);
}

#[test]
fn conf_loss_matches_finite_differences() {
    let t = teacher(19);
    let s = perturb(&student_of(&t, 20), 0.3, &mut rng(21));
    let f = forged(&[0, 1, 2, 1], &mut rng(22));
    let report = check_gradients(|xs| Ok(conf_loss(&with_params(&s, xs), &f).unwrap()), &param_values(&s), STEP).unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn ewc_examples() {
    let t = teacher(23);
    let fisher = compute_fisher(&t, &batch(&[0, 1, 2], &mut rng(24)), FisherMode::Full).unwrap();
    let s = student_of(&t, 25);
    assert_eq!(ewc_penalty(&s, &fisher, 0.01).unwrap().item().unwrap(), 0.0);
    let moved = perturb(&s, 0.1, &mut rng(26));
    assert_eq!(ewc_penalty(&moved, &fisher, 0.0).unwrap().item().unwrap(), 0.0);
    assert!(ewc_penalty(&moved, &fisher, 0.01).unwrap().item().unwrap() > 0.0);
}

#[test]
fn ewc_single_parameter_arithmetic() {
    let t = teacher(27);
    let mut fisher = compute_fisher(&t, &batch(&[0, 1, 2], &mut rng(28)), FisherMode::Full).unwrap();
    for l in &mut fisher.layers {
        l.values.iter_mut().for_each(|v| *v = 0.0);
    }
    fisher.layers[1].values[0] = 2.0;
    let mut m = t.with_trainable(true);
    let mut bias = m.blocks[0].conv.bias.to_vec();
    bias[0] += 3.0;
    m.blocks[0].conv.bias = Tensor::new(vec![bias.len()], bias).unwrap();
    let p = ewc_penalty(&m, &fisher, 0.01).unwrap().item().unwrap();
    assert!((p - 0.18).abs() < 1e-12, "{p}");
}

#[test]
fn ewc_and_mewc_agree_on_constant_layer_fisher() {
    let t = teacher(29);
    let mut fisher = compute_fisher(&t, &batch(&[0, 1, 2, 0], &mut rng(30)), FisherMode::Full).unwrap();
    for (i, l) in fisher.layers.iter_mut().enumerate() {
        l.values.iter_mut().for_each(|v| *v = 0.25 * (i + 1) as f64);
    }
    let mean = fisher.to_layer_mean();
    assert_eq!(mean.storage_len(), mean.layers.len());
    let m = perturb(&student_of(&t, 31), 0.2, &mut rng(32));
    let a = ewc_penalty(&m, &fisher, 0.01).unwrap().item().unwrap();
    let b = ewc_penalty(&m, &mean, 0.01).unwrap().item().unwrap();
    assert!((a - b).abs() <= 1e-15 * a.abs(), "{a} vs {b}");
}

#[test]
fn ewc_gradients_match_finite_differences() {
    let t = teacher(33);
    let stream = batch(&[0, 1, 2, 2, 1], &mut rng(34));
    let m = perturb(&student_of(&t, 35), 0.2, &mut rng(36));
    for mode in [FisherMode::Full, FisherMode::LayerMean] {
        let fisher = compute_fisher(&t, &stream, mode).unwrap();
        let report =
            check_gradients(|xs| Ok(ewc_penalty(&with_params(&m, xs), &fisher, 0.5).unwrap()), &param_values(&m), STEP).unwrap();
        assert!(report.passes(TOL), "{mode:?} {report:?}");
    }
}

#[test]
fn ewc_shape_mismatch_is_a_contract_error() {
    let t = teacher(37);
    let mut fisher = compute_fisher(&t, &batch(&[0, 1], &mut rng(38)), FisherMode::Full).unwrap();
    fisher.layers[0].shape[0] += 1;
    assert!(matches!(ewc_penalty(&t, &fisher, 0.01), Err(NiffError::Contract(_))));
    fisher.layers.remove(0);
    assert!(matches!(ewc_penalty(&t, &fisher, 0.01), Err(NiffError::Contract(_))));
}

#[test]
fn fisher_matches_explicit_per_sample_oracle() {
    let t = teacher(39);
    let stream = batch(&[0, 2, 1], &mut rng(40));
    let fisher = compute_fisher(&t, &stream, FisherMode::Full).unwrap();
    let params = param_values(&t);
    let mut oracle: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    for i in 0..stream.len() {
        let one = stream.select(&[i]).unwrap();
        let g = numeric_gradient(
            |xs| {
                let (ce, reg) = supervised_terms(&with_params(&t, xs), &one).unwrap();
                Ok(ce.item()? + reg.item()?)
            },
            &params,
            1e-6,
        )
        .unwrap();
        for (acc, gi) in oracle.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v * v / 3.0);
        }
    }
    for (layer, want) in fisher.layers.iter().zip(&oracle) {
        for (a, b) in layer.values.iter().zip(want) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-4), "{}: {a} vs {b}", layer.name);
        }
        assert!(layer.values.iter().all(|v| *v >= 0.0));
    }
    let mean = fisher.to_layer_mean();
    assert_eq!(mean.storage_len(), t.named_params().len());
    assert!(fisher.storage_len() > mean.storage_len());
}

#[test]
fn fisher_is_zero_without_gradients_and_rejects_empty_streams() {
    let mut t = teacher(41);
    // Zero heads and a zero last-block conv leave pooled features constant and
    // logits uniform; with targets equal to the zero outputs every gradient vanishes.
    t.cls.base_weight = Tensor::zeros(t.cls.base_weight.shape().to_vec());
    t.reg.base_weight = Tensor::zeros(t.reg.base_weight.shape().to_vec());
    let mut stream = batch(&[0, 1, 2], &mut rng(42));
    stream.targets.iter_mut().for_each(|v| *v = 0.0);
    let f = compute_fisher(&t, &stream, FisherMode::Full).unwrap();
    for l in f.layers.iter().filter(|l| l.name.starts_with("block")) {
        assert!(l.values.iter().all(|v| *v == 0.0), "{}", l.name);
    }
    let empty = stream.select(&[]);
    let err = match empty {
        Ok(e) => compute_fisher(&t, &e, FisherMode::Full).unwrap_err(),
        Err(e) => e,
    };
    assert!(matches!(err, NiffError::Contract(_) | NiffError::Tensor(_) | NiffError::Dimension(_)));
}

#[test]
fn fisher_binary_round_trip() {
    let t = teacher(43);
    let f = compute_fisher(&t, &batch(&[0, 1, 2], &mut rng(44)), FisherMode::Full).unwrap();
    for info in [f.clone(), f.to_layer_mean()] {
        let bytes = info.to_bytes().unwrap();
        let back = FisherInfo::from_bytes(&bytes).unwrap();
        assert_eq!(back, info);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
    let bytes = f.to_bytes().unwrap();
    assert!(FisherInfo::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn novel_loss_without_replay_is_plain_finetuning() {
    let t = teacher(45);
    let s = perturb(&student_of(&t, 46), 0.1, &mut rng(47));
    let novel = batch(&[3, 4, 3], &mut rng(48));
    let l = novel_loss(&s, &t, &novel, None, 0.1, LossSwitches::all_off()).unwrap();
    let (ce, reg) = supervised_terms(&s, &novel).unwrap();
    let want = ce.item().unwrap() + reg.item().unwrap();
    assert!(l.replay.is_none());
    assert_eq!(l.total().unwrap().item().unwrap(), want);
    assert_eq!(l.breakdown.total, want);
}

#[test]
fn novel_loss_with_empty_novel_batch_and_clone_has_zero_kd() {
    let t = teacher(49);
    let s = student_of(&t, 50);
    let empty = batch(&[3], &mut rng(51)).select(&[]).unwrap();
    let f = forged(&[0, 1, 2], &mut rng(52));
    let l = novel_loss(&s, &t, &empty, Some(&f), 0.1, LossSwitches::all_on()).unwrap();
    assert!(l.novel.is_none());
    let b = l.breakdown;
    assert_eq!((b.cls_feat_term, b.reg_feat_term, b.reg_l1_term), (0.0, 0.0, 0.0));
    assert_eq!(b.total, b.conf_term);
}

#[test]
fn conf_term_changes_classifier_base_gradients() {
    let t = teacher(53);
    let s = perturb(&student_of(&t, 54), 0.1, &mut rng(55));
    let novel = batch(&[3, 4], &mut rng(56));
    let f = forged(&[0, 1, 2], &mut rng(57));
    let grad = |conf: bool| {
        let sw = LossSwitches { conf, ..LossSwitches::all_on() };
        s.clear_grads();
        novel_loss(&s, &t, &novel, Some(&f), 0.1, sw).unwrap().total().unwrap().backward().unwrap();
        s.cls.base_weight.grad().unwrap()
    };
    assert_ne!(grad(true), grad(false));
}

#[test]
fn novel_loss_matches_finite_differences() {
    let t = teacher(58);
    let s = perturb(&student_of(&t, 59), 0.1, &mut rng(60));
    let novel = batch(&[3, 4, 4], &mut rng(61));
    let f = forged(&[0, 1, 2], &mut rng(62));
    // λ_F = 0 keeps the detached weight rows out of the finite-difference probe.
    let report = check_gradients(
        |xs| Ok(novel_loss(&with_params(&s, xs), &t, &novel, Some(&f), 0.0, LossSwitches::all_on()).unwrap().total().unwrap()),
        &param_values(&s),
        STEP,
    )
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn generator_loss_matches_finite_differences() {
    let t = teacher(63);
    let snap = snapshot(&t, 6, true, 64);
    let obj = GeneratorObjective::new(&snap, &t, 5.0, true).unwrap();
    let g = generator(65);
    let z = sample_noise(&mut rng(66), 5, 4).unwrap();
    for class in 0..3 {
        let report = check_gradients(
            |xs| {
                let (kl, ce) = obj.class_terms(class, &with_params(&g, xs).forward(class, &z).unwrap()).unwrap();
                kl.add(&ce)
            },
            &param_values(&g),
            STEP,
        )
        .unwrap();
        assert!(report.passes(TOL), "class {class}: {report:?}");
    }
}

#[test]
fn replaying_recorded_features_gives_near_zero_kl() {
    let t = teacher(67);
    let labels: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, 8)).collect();
    let real = batch(&labels, &mut rng(68));
    let mut ws = t.watchers(&niff_core::stats::SitePlacement::default().sites(2), true).unwrap();
    t.forward_observed(&real.features, &real.labels, &mut ws).unwrap();
    let snap = ws.snapshot().unwrap();
    let obj = GeneratorObjective::new(&snap, &t, 5.0, true).unwrap();
    for (c, idx) in real.indices_by_class(3).iter().enumerate() {
        let (kl, _) = obj.class_terms(c, &real.select(idx).unwrap().features).unwrap();
        assert!(kl.item().unwrap().abs() < 1e-6);
    }
}

#[test]
fn untrained_generator_ce_is_near_uniform() {
    // Zero classifier weights make every prediction uniform.
    let mut t = teacher(69);
    t.cls.base_weight = Tensor::zeros(t.cls.base_weight.shape().to_vec());
    let snap = snapshot(&t, 5, true, 70);
    let obj = GeneratorObjective::new(&snap, &t, 5.0, true).unwrap();
    let b = obj.step(&generator(71), &mut rng(72), 4, false).unwrap();
    assert!((b.ce_term - 3f64.ln()).abs() < 1e-12);
    assert!((b.total - b.kl_term - b.ce_term).abs() < 1e-12);
    assert!(matches!(obj.step(&generator(71), &mut rng(72), 1, false), Err(NiffError::InsufficientBatch(1))));
}

#[test]
fn class_agnostic_generator_step_runs() {
    let t = teacher(73);
    let snap = snapshot(&t, 5, false, 74);
    let obj = GeneratorObjective::new(&snap, &t, 5.0, false).unwrap();
    let g = generator(75);
    g.zero_grad();
    let b = obj.step(&g, &mut rng(76), 3, true).unwrap();
    assert!(b.kl_term > 0.0);
    assert!(g.named_params().iter().all(|(_, p)| p.grad().unwrap().iter().any(|v| *v != 0.0)));
}

fn random_fisher(t: &HeadModel, r: &mut impl rand::Rng) -> FisherInfo {
    FisherInfo {
        mode: FisherMode::Full,
        layers: t
            .named_params()
            .into_iter()
            .map(|(name, p)| FisherLayer {
                name,
                shape: p.shape().to_vec(),
                values: (0..p.numel()).map(|_| r.random_range(0.0..2.0)).collect(),
                anchor: p.to_vec(),
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kl_is_nonnegative(
        stats in prop::collection::vec((-3.0f64..3.0, 0.0f64..4.0, -3.0f64..3.0, 0.0f64..4.0), 1..16)
    ) {
        let mu: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
        let mf: Vec<f64> = stats.iter().map(|s| s.2).collect();
        let vf: Vec<f64> = stats.iter().map(|s| s.3).collect();
        prop_assert!(kl_gaussian_diag(&mu, &var, &mf, &vf, KL_EPS).unwrap() >= -1e-6);
    }

    #[test]
    fn ewc_is_monotone_in_drift(seed in any::<u64>(), layer in 0usize..8, a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let t = teacher(seed % 5);
        let mut r = rng(seed);
        let fisher = random_fisher(&t, &mut r);
        let idx = layer % t.named_params().len();
        let penalty = |drift: f64| {
            let mut xs = param_values(&t);
            let mut data = xs[idx].to_vec();
            data[0] += drift;
            xs[idx] = Tensor::new(xs[idx].shape().to_vec(), data).unwrap();
            ewc_penalty(&with_params(&t, &xs), &fisher, 0.01).unwrap().item().unwrap()
        };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(penalty(lo) <= penalty(hi));
        prop_assert!(penalty(-lo) <= penalty(-hi));
    }

    #[test]
    fn disabling_a_term_subtracts_it(seed in any::<u64>(), mask in 0u8..8) {
        let t = teacher(seed % 3);
        let mut r = rng(seed);
        let s = perturb(&student_of(&t, seed), 0.1, &mut r);
        let novel = batch(&[3, 4], &mut r);
        let f = forged(&[0, 1, 2, 1], &mut r);
        let full = novel_loss(&s, &t, &novel, Some(&f), 0.1, LossSwitches::all_on()).unwrap();
        let sw = LossSwitches { conf: mask & 1 == 0, feat_distill: mask & 2 == 0, reg_l1: mask & 4 == 0 };
        let part = novel_loss(&s, &t, &novel, Some(&f), 0.1, sw).unwrap();
        let b = full.breakdown;
        let mut expect = b.total;
        if !sw.conf { expect -= b.conf_term; }
        if !sw.feat_distill { expect -= b.cls_feat_term + b.reg_feat_term; }
        if !sw.reg_l1 { expect -= b.reg_l1_term; }
        let got = part.total().unwrap().item().unwrap();
        prop_assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        prop_assert!((part.breakdown.total - got).abs() <= 1e-12 * got.abs().max(1.0));
    }
}


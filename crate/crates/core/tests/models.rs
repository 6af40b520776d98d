use niff_core::models::{
    sample_noise, Architecture, GeneratorModel, GeneratorSpec, HeadModel, HeadSpec, ModelCheckpoint, Parameterized,
};
use niff_core::stats::SiteId;
use niff_core::NiffError;
use niff_tensor::{Sgd, SgdConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn head_spec() -> HeadSpec {
    HeadSpec {
        in_channels: 4,
        height: 3,
        width: 3,
        hidden: vec![5, 6],
        kernel: 3,
        num_base: 3,
        num_novel: 0,
    }
}

fn gen_spec() -> GeneratorSpec {
    GeneratorSpec {
        z_dim: 5,
        trunk_channels: 3,
        layers: 2,
        kernel: 3,
        height: 3,
        width: 3,
        out_channels: 4,
        num_classes: 3,
        slope: 0.2,
    }
}

fn input(n: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(vec![n, 4, 3, 3], (0..n * 36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn snapshot_params(m: &impl Parameterized) -> Vec<(String, Vec<f64>)> {
    m.named_params().into_iter().map(|(n, p)| (n, p.to_vec())).collect()
}

#[test]
fn generator_heads_are_isolated() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = GeneratorModel::new(&gen_spec(), &mut rng).unwrap();
    let z = sample_noise(&mut rng, 4, 5).unwrap();
    g.zero_grad();
    g.forward(1, &z).unwrap().square().sum().backward().unwrap();
    for (name, p) in g.named_params() {
        let grad = p.grad().unwrap();
        let nonzero = grad.iter().any(|v| *v != 0.0);
        if name.starts_with("head0.") || name.starts_with("head2.") {
            assert!(!nonzero, "{name} received gradient from class 1");
        } else {
            assert!(nonzero, "{name} received no gradient");
        }
    }
}

#[test]
fn teacher_is_untouched_by_student_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let teacher = HeadModel::build_teacher(&head_spec(), &mut rng).unwrap().frozen();
    let before = snapshot_params(&teacher);
    let norms_before: Vec<_> = teacher.blocks.iter().map(|b| b.norm.clone()).collect();
    let mut student = HeadModel::clone_student(&teacher, 2, &mut rng).unwrap();
    let mut opt = Sgd::new(SgdConfig::new(0.1, 0.9, 1e-3).unwrap()).unwrap();
    for _ in 0..5 {
        student.zero_grad();
        let x = input(6, &mut rng);
        let out = student.forward(&x, &[]).unwrap();
        let t = teacher.forward(&x, &[]).unwrap();
        let loss = out.logits.square().sum().add(&out.pooled.sub(&t.pooled).unwrap().square().sum()).unwrap();
        loss.backward().unwrap();
        opt.step(&mut student.params_mut()).unwrap();
    }
    assert_eq!(snapshot_params(&teacher), before);
    assert_ne!(snapshot_params(&student)[0].1, before[0].1);
    for (b, n) in student.blocks.iter().zip(&norms_before) {
        assert_eq!(&b.norm, n, "frozen norm changed during training");
    }
}

#[test]
fn head_checkpoint_round_trip_preserves_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let teacher = HeadModel::build_teacher(&head_spec(), &mut rng).unwrap();
    let student = HeadModel::clone_student(&teacher, 2, &mut rng).unwrap();
    let x = input(3, &mut rng);
    let taps = [SiteId::PreNorm(0), SiteId::PostSoftmax];
    for m in [&teacher, &student] {
        let ck = m.to_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back_ck = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back_ck, ck);
        assert_eq!(back_ck.to_bytes().unwrap(), bytes);
        let back = HeadModel::from_checkpoint(&back_ck, false).unwrap();
        let (a, b) = (m.forward(&x, &taps).unwrap(), back.forward(&x, &taps).unwrap());
        assert_eq!(a.logits.to_vec(), b.logits.to_vec());
        assert_eq!(a.reg.to_vec(), b.reg.to_vec());
        for ((_, ta), (_, tb)) in a.sites.iter().zip(&b.sites) {
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        assert_eq!(back.spec(), m.spec());
    }
}

#[test]
fn generator_checkpoint_round_trip_preserves_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = GeneratorModel::new(&gen_spec(), &mut rng).unwrap();
    let z = sample_noise(&mut rng, 2, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    g.to_checkpoint().save(&path).unwrap();
    let back = GeneratorModel::from_checkpoint(&ModelCheckpoint::load(&path).unwrap(), true).unwrap();
    for c in 0..3 {
        assert_eq!(g.forward(c, &z).unwrap().to_vec(), back.forward(c, &z).unwrap().to_vec());
    }
}

#[test]
fn checkpoint_kind_and_shape_mismatches_are_format_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g = GeneratorModel::new(&gen_spec(), &mut rng).unwrap();
    let head = HeadModel::build_teacher(&head_spec(), &mut rng).unwrap();
    assert!(matches!(
        HeadModel::from_checkpoint(&g.to_checkpoint(), false),
        Err(NiffError::Format { .. })
    ));
    let mut ck = head.to_checkpoint();
    assert!(matches!(ck.architecture, Architecture::Head(_)));
    ck.arrays[0].shape[0] += 1;
    assert!(matches!(HeadModel::from_checkpoint(&ck, false), Err(NiffError::Format { .. })));
    let mut ck = head.to_checkpoint();
    ck.arrays.pop();
    assert!(matches!(HeadModel::from_checkpoint(&ck, false), Err(NiffError::Format { .. })));
    let bytes = head.to_checkpoint().to_bytes().unwrap();
    assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

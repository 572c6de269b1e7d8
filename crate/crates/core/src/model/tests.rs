use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::distributions::kl_std_normal;

fn mnist_batch(b: usize, seed: u64) -> Batch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::uniform(&[b, 784], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..b).map(|r| (r * 7 + seed as usize) % 10).collect();
    Batch {
        modalities: vec![
            ModalityBatch::dense(images),
            ModalityBatch::one_hot(labels, 10),
        ],
    }
}

fn encode_all<'p>(
    params: &'p MhvaeParams<f32>,
    batch: &Batch<f32>,
    mode: NormMode,
) -> (Pass<'p, f32>, Vec<EncodeOut>) {
    let mut pass = Pass::new(params, mode);
    let outs = (0..2)
        .map(|i| {
            let x = pass.graph.constant(batch.modalities[i].values.clone());
            pass.encode_modality(i, x).unwrap()
        })
        .collect();
    (pass, outs)
}

#[test]
fn zero_network_is_standard_normal_everywhere() {
    let params = MhvaeParams::<f32>::zeros(&ModelConfig::mnist()).unwrap();
    let batch = mnist_batch(4, 0);
    for mode in [NormMode::Train, NormMode::Eval] {
        let (mut pass, outs) = encode_all(&params, &batch, mode);
        for e in &outs {
            assert!(pass.graph.value(e.h).data().iter().all(|&v| v == 0.0));
            assert!(pass.graph.value(e.q_z.mean).data().iter().all(|&v| v == 0.0));
            assert!(pass.graph.value(e.q_z.log_var).data().iter().all(|&v| v == 0.0));
        }
        let hs: Vec<Var> = outs.iter().map(|e| e.h).collect();
        let qc = pass.core_posterior(&hs, &vec![Mask::all(2); 4]).unwrap();
        let kl = kl_std_normal(&mut pass.graph, &qc).unwrap();
        assert!(pass.graph.value(kl).data().iter().all(|&v| v == 0.0));
        let p = pass.prior_map(qc.mean, 1).unwrap();
        assert!(pass.graph.value(p.mean).data().iter().all(|&v| v == 0.0));
        assert!(pass.graph.value(p.log_var).data().iter().all(|&v| v == 0.0));
        let img = pass.decode_modality(0, outs[0].q_z.mean).unwrap();
        assert!(pass.graph.value(img).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn mnist_shapes() {
    let params = MhvaeParams::<f32>::init(&ModelConfig::mnist(), 1).unwrap();
    let batch = mnist_batch(3, 1);
    let (mut pass, outs) = encode_all(&params, &batch, NormMode::Eval);
    assert_eq!(pass.graph.shape(outs[0].h), &[3, 512]);
    assert_eq!(pass.graph.shape(outs[0].q_z.mean), &[3, 16]);
    assert_eq!(pass.graph.shape(outs[1].h), &[3, 128]);
    assert_eq!(pass.graph.shape(outs[1].q_z.log_var), &[3, 16]);
    let hs: Vec<Var> = outs.iter().map(|e| e.h).collect();
    let cat = pass.graph.concat(&hs, 1).unwrap();
    assert_eq!(pass.graph.shape(cat), &[3, 640]);
    let qc = pass.encode_core(&hs).unwrap();
    assert_eq!(pass.graph.shape(qc.mean), &[3, 10]);
    for i in 0..2 {
        let p = pass.prior_map(qc.mean, i).unwrap();
        assert_eq!(pass.graph.shape(p.mean), &[3, 16]);
    }
    let img = pass.decode_modality(0, outs[0].q_z.mean).unwrap();
    assert_eq!(pass.graph.shape(img), &[3, 784]);
    let lab = pass.decode_modality(1, outs[1].q_z.mean).unwrap();
    assert_eq!(pass.graph.shape(lab), &[3, 10]);
    assert!(matches!(pass.prior_map(qc.mean, 2), Err(ModelError::UnknownModality(2))));
    let bad = pass.graph.constant(Tensor::zeros(&[3, 783]));
    assert!(pass.encode_modality(0, bad).is_err());
    assert!(pass.encode_core(&hs[..1]).is_err());
}

#[test]
fn eval_mode_is_bit_reproducible() {
    let params = MhvaeParams::<f32>::init(&ModelConfig::mnist(), 2).unwrap();
    let batch = mnist_batch(5, 2);
    let (p1, o1) = encode_all(&params, &batch, NormMode::Eval);
    let (p2, o2) = encode_all(&params, &batch, NormMode::Eval);
    for (a, b) in o1.iter().zip(&o2) {
        assert_eq!(p1.graph.value(a.h).data(), p2.graph.value(b.h).data());
        assert_eq!(p1.graph.value(a.q_z.mean).data(), p2.graph.value(b.q_z.mean).data());
    }
}

#[test]
fn init_is_seeded_and_starts_near_unit_variance() {
    let cfg = ModelConfig::mnist();
    let a = MhvaeParams::<f32>::init(&cfg, 3).unwrap();
    let b = MhvaeParams::<f32>::init(&cfg, 3).unwrap();
    let c = MhvaeParams::<f32>::init(&cfg, 4).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(!a.bitwise_eq(&c));
    for p in a.store.iter().filter(|p| p.name.ends_with(".b")) {
        assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
    }
    let batch = mnist_batch(8, 3);
    let (pass, outs) = encode_all(&a, &batch, NormMode::Train);
    for e in &outs {
        let lv = pass.graph.value(e.q_z.log_var).data();
        let mean_abs = lv.iter().map(|v| v.abs()).sum::<f32>() / lv.len() as f32;
        assert!(mean_abs < 0.5, "{mean_abs}");
        assert!(lv.iter().all(|v| v.abs() < 2.0));
    }
}

#[test]
fn dropped_modality_has_no_influence_on_the_core_posterior() {
    let params = MhvaeParams::<f32>::init(&ModelConfig::mnist(), 5).unwrap();
    let a = mnist_batch(4, 5);
    let mut b = a.clone();
    b.modalities[1] = ModalityBatch::one_hot(vec![9, 9, 9, 9], 10);
    let masks = vec![Mask::new(vec![true, false]).unwrap(); 4];
    let core = |batch: &Batch<f32>| {
        let (mut pass, outs) = encode_all(&params, batch, NormMode::Eval);
        let hs: Vec<Var> = outs.iter().map(|e| e.h).collect();
        let q = pass.core_posterior(&hs, &masks).unwrap();
        (pass.graph.value(q.mean).clone(), pass.graph.value(q.log_var).clone())
    };
    assert_eq!(core(&a), core(&b));
}

#[test]
fn prior_map_is_differentiable_in_the_core_latent() {
    let params = MhvaeParams::<f64>::init(&ModelConfig::mnist(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let zc = Tensor::<f64>::randn(&[3, 10], &mut rng);
    let objective = |z: &Tensor<f64>| {
        let mut pass = Pass::new(&params, NormMode::Eval);
        let zv = pass.graph.input(z.clone());
        let p = pass.prior_map(zv, 1).unwrap();
        let g = &mut pass.graph;
        let a = g.mul(p.mean, p.mean).unwrap();
        let b = g.add(a, p.log_var).unwrap();
        let l = g.sum(b);
        let (g, _) = pass.finish();
        (g, zv, l)
    };
    let (g, zv, l) = objective(&zc);
    let analytic = g.backward(l).unwrap().get(zv).unwrap().clone();
    let eps = 1e-6;
    for j in 0..zc.numel() {
        let mut up = zc.clone();
        up.data_mut()[j] += eps;
        let mut down = zc.clone();
        down.data_mut()[j] -= eps;
        let (gu, _, lu) = objective(&up);
        let (gd, _, ld) = objective(&down);
        let numeric = (gu.value(lu).item() - gd.value(ld).item()) / (2.0 * eps);
        let a = analytic.data()[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
        assert!(err < 1e-4, "entry {j}: {a} vs {numeric}");
    }
}

#[test]
fn generation_is_seeded_and_in_range() {
    let params = MhvaeParams::<f32>::init(&ModelConfig::mnist(), 7).unwrap();
    let a = generate_from_prior(&params, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = generate_from_prior(&params, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a[0].means, b[0].means);
    assert_eq!(a[0].means.shape(), &[3, 784]);
    assert!(a[0].means.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(a[1].classes.as_ref().unwrap().len(), 3);

    let zero = MhvaeParams::<f32>::zeros(&ModelConfig::mnist()).unwrap();
    let g = generate_from_prior(&zero, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(g[0].means.data().iter().all(|&v| v == 0.5));
}

#[test]
fn cross_modal_inference_paths() {
    let params = MhvaeParams::<f32>::init(&ModelConfig::mnist(), 8).unwrap();
    let batch = mnist_batch(2, 8);
    let out = cross_modal_infer(&params, &batch, &[1], None).unwrap();
    assert_eq!(out[0].means.shape(), &[2, 784]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = cross_modal_infer(&params, &batch, &[0, 1], Some(&mut rng)).unwrap();
    assert_eq!(out[1].means.shape(), &[2, 10]);
    assert!(cross_modal_infer(&params, &batch, &[], None).is_err());
    assert!(cross_modal_infer(&params, &batch, &[2], None).is_err());

    let zero = MhvaeParams::<f32>::zeros(&ModelConfig::mnist()).unwrap();
    let out = cross_modal_infer(&zero, &batch, &[0], None).unwrap();
    for &p in out[1].means.data() {
        assert!((p - 0.1).abs() < 1e-7);
    }
}

#[test]
fn convolutional_image_network_shapes() {
    let params = MhvaeParams::<f32>::init(&ModelConfig::fashion_mnist(), 9).unwrap();
    let batch = mnist_batch(2, 9);
    let (mut pass, outs) = encode_all(&params, &batch, NormMode::Train);
    assert_eq!(pass.graph.shape(outs[0].h), &[2, 128]);
    let img = pass.decode_modality(0, outs[0].q_z.mean).unwrap();
    assert_eq!(pass.graph.shape(img), &[2, 784]);
}

#[test]
fn product_of_experts_posterior_runs() {
    let mut cfg = ModelConfig::mnist();
    cfg.posterior = PosteriorKind::Poe;
    let params = MhvaeParams::<f32>::init(&cfg, 10).unwrap();
    assert!(params.store.id("core.enc.0.w").is_none());
    let batch = mnist_batch(4, 10);
    let (mut pass, outs) = encode_all(&params, &batch, NormMode::Eval);
    let hs: Vec<Var> = outs.iter().map(|e| e.h).collect();
    let masks = vec![
        Mask::all(2),
        Mask::new(vec![true, false]).unwrap(),
        Mask::new(vec![false, true]).unwrap(),
        Mask::all(2),
    ];
    let q = pass.core_posterior(&hs, &masks).unwrap();
    assert_eq!(pass.graph.shape(q.mean), &[4, 10]);
    assert!(pass.encode_core(&hs).is_err());
}

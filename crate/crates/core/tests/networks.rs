//! Shape, determinism and gradient-flow contracts of the model.

use candle::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use udgan_core::losses::{
    adversarial_loss_d, adversarial_loss_g, identity_loss, kl_loss, reconstruction_loss, target_loss, LossWeights,
    ReconTarget,
};
use udgan_core::nn::{
    global_score, read_checkpoint, reparameterize, save_checkpoint, CheckpointMeta, Ctx, Mode, ModelConfig, Noise,
    QuadNoise, UdGan, ALL_GROUPS,
};
use udgan_core::train::TrainConfig;

fn toy_model(seed: u64) -> UdGan {
    let mut cfg = TrainConfig::toy().model;
    cfg.num_classes = 4;
    cfg.dropout = 0.5;
    UdGan::new(cfg, seed, &Device::Cpu).unwrap()
}

fn images(model: &UdGan, n: usize, seed: u64) -> Tensor {
    let size = model.config().image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * 3 * size.pixels()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(data, (n, 3, size.height, size.width), &Device::Cpu).unwrap()
}

fn max_abs(t: &Tensor) -> f32 {
    t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
}

#[test]
fn reference_config_shapes() {
    let mut cfg = ModelConfig::default();
    cfg.num_classes = 3;
    let model = UdGan::new(cfg, 0, &Device::Cpu).unwrap();
    let x = images(&model, 1, 1);
    let v_id = model.encode_identity(&x, Mode::Eval).unwrap();
    assert_eq!(v_id.dims(), &[1, 512]);
    let codes = model.encode_content(&x, Mode::Eval, Noise::Zero, &Ctx::new(0)).unwrap();
    let out = model.generate(&v_id, &codes.v_c, Mode::Eval, &Ctx::new(0)).unwrap();
    assert_eq!(out.dims(), &[1, 3, 384, 128]);
    let (patches, global) = model.discriminate(&x).unwrap();
    let (h, w) = (patches.dim(2).unwrap(), patches.dim(3).unwrap());
    assert!(h * w > 1, "patch map {h}x{w} must stay local");
    assert_eq!(global.dims(), &[1]);
}

#[test]
fn identity_rows_depend_only_on_their_image() {
    let model = toy_model(1);
    let x = images(&model, 4, 2);
    let all = model.encode_identity(&x, Mode::Eval).unwrap();
    assert_eq!(all.dims(), &[4, 32]);
    for i in 0..4 {
        let alone = model.encode_identity(&x.narrow(0, i, 1).unwrap(), Mode::Eval).unwrap();
        let diff = (alone - all.narrow(0, i, 1).unwrap()).unwrap();
        assert!(max_abs(&diff) < 1e-5);
    }
    let twins = Tensor::cat(&[&x.narrow(0, 0, 1).unwrap(), &x.narrow(0, 0, 1).unwrap()], 0).unwrap();
    let v = model.encode_identity(&twins, Mode::Eval).unwrap().to_vec2::<f32>().unwrap();
    assert_eq!(v[0], v[1]);
}

#[test]
fn wrong_image_size_is_a_shape_error() {
    let model = toy_model(1);
    let x = Tensor::zeros((1, 3, 32, 16), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(model.encode_identity(&x, Mode::Eval), Err(udgan_core::Error::Shape(_))));
}

#[test]
fn content_codes_follow_reparameterization() {
    let model = toy_model(2);
    let x = images(&model, 8, 3);
    let ctx = Ctx::new(0);
    let codes = model.encode_content(&x, Mode::Eval, Noise::Zero, &ctx).unwrap();
    for t in [&codes.mu, &codes.logvar, &codes.v_c] {
        assert_eq!(t.dims(), &[8, 32]);
    }
    assert_eq!(codes.v_c.to_vec2::<f32>().unwrap(), codes.mu.to_vec2::<f32>().unwrap());

    let mu = Tensor::new(&[[0.5f64, -1.0, 2.0]], &Device::Cpu).unwrap();
    let zero = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
    let ones = Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap();
    let v = reparameterize(&mu, &zero, Noise::Given(&ones), &ctx).unwrap();
    assert_eq!(v.to_vec2::<f64>().unwrap(), vec![vec![1.5, 0.0, 3.0]]);
}

#[test]
fn reparameterization_gradients_match_finite_differences() {
    let dev = Device::Cpu;
    let mu = Var::new(&[0.3f64, -0.7, 1.1], &dev).unwrap();
    let logvar = Var::new(&[0.2f64, -0.4, 0.9], &dev).unwrap();
    let eps = Tensor::new(&[0.5f64, -1.5, 0.8], &dev).unwrap();
    let ctx = Ctx::new(0);
    // Weighted sum so every coordinate contributes a distinct derivative.
    let weights = Tensor::new(&[1.0f64, 2.0, -3.0], &dev).unwrap();
    let f = |m: &Tensor, l: &Tensor| -> Tensor {
        (reparameterize(m, l, Noise::Given(&eps), &ctx).unwrap() * &weights).unwrap().sum_all().unwrap()
    };
    let grads = f(mu.as_tensor(), logvar.as_tensor()).backward().unwrap();
    let g_mu = grads.get(&mu).unwrap().to_vec1::<f64>().unwrap();
    let g_lv = grads.get(&logvar).unwrap().to_vec1::<f64>().unwrap();
    let w = weights.to_vec1::<f64>().unwrap();
    let e = eps.to_vec1::<f64>().unwrap();
    let lv = logvar.as_tensor().to_vec1::<f64>().unwrap();
    for i in 0..3 {
        assert!((g_mu[i] - w[i]).abs() < 1e-12);
        let closed = w[i] * 0.5 * e[i] * (0.5 * lv[i]).exp();
        assert!((g_lv[i] - closed).abs() < 1e-12);
        let h = 1e-6;
        let bump = |delta: f64| {
            let mut l = lv.clone();
            l[i] += delta;
            f(mu.as_tensor(), &Tensor::new(l.as_slice(), &dev).unwrap()).to_scalar::<f64>().unwrap()
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        assert!((fd - g_lv[i]).abs() < 1e-6, "fd {fd} vs {}", g_lv[i]);
    }
}

#[test]
fn generator_output_is_bounded_and_deterministic_in_eval() {
    let model = toy_model(3);
    let ctx = Ctx::new(0);
    let dev = Device::Cpu;
    let v_id = (Tensor::randn(0f32, 1.0, (5, 32), &dev).unwrap() * 10.0).unwrap();
    let v_c = (Tensor::randn(0f32, 1.0, (5, 32), &dev).unwrap() * 10.0).unwrap();
    let a = model.generate(&v_id, &v_c, Mode::Eval, &ctx).unwrap();
    let b = model.generate(&v_id, &v_c, Mode::Eval, &ctx).unwrap();
    assert_eq!(a.dims(), &[5, 3, 48, 16]);
    assert_eq!(max_abs(&(&a - &b).unwrap()), 0.0);
    let (low, high) = model.generator().output_range().unwrap();
    let per_channel = a.transpose(0, 1).unwrap().flatten_from(1).unwrap();
    let mins = per_channel.min(D::Minus1).unwrap().to_vec1::<f32>().unwrap();
    let maxs = per_channel.max(D::Minus1).unwrap().to_vec1::<f32>().unwrap();
    for c in 0..3 {
        assert!(mins[c] >= low[c] - 1e-5 && maxs[c] <= high[c] + 1e-5);
    }
}

#[test]
fn swap_quad_contracts() {
    let model = toy_model(4);
    let ctx = Ctx::new(0);
    let x1 = images(&model, 3, 5);
    let x2 = images(&model, 3, 6);
    let noise = Tensor::randn(0f32, 1.0, (3, 32), &Device::Cpu).unwrap();

    let same = model.swap_generate(&x1, &x1, Mode::Eval, QuadNoise::Shared(noise.clone()), &ctx).unwrap();
    for (i, j) in [(0, 1), (1, 0), (1, 1)] {
        assert!(max_abs(&(same.quad.get(i, j) - same.quad.get(0, 0)).unwrap()) < 1e-5);
    }

    let fwd = model.swap_generate(&x1, &x2, Mode::Eval, QuadNoise::Shared(noise.clone()), &ctx).unwrap();
    let rev = model.swap_generate(&x2, &x1, Mode::Eval, QuadNoise::Shared(noise), &ctx).unwrap();
    for part in fwd.quad.parts() {
        assert_eq!(part.dims(), x1.dims());
    }
    for i in 0..2 {
        for j in 0..2 {
            let d = (fwd.quad.get(i, j) - rev.quad.get(1 - i, 1 - j)).unwrap();
            assert!(max_abs(&d) < 1e-5);
        }
    }
}

#[test]
fn global_score_is_per_image_patch_mean() {
    let dev = Device::Cpu;
    let c = Tensor::full(0.75f32, (2, 1, 3, 2), &dev).unwrap();
    assert_eq!(global_score(&c).unwrap().to_vec1::<f32>().unwrap(), vec![0.75, 0.75]);

    let model = toy_model(5);
    let x = images(&model, 3, 7);
    let (patches, global) = model.discriminate(&x).unwrap();
    let g = global.to_vec1::<f32>().unwrap();
    for i in 0..3 {
        let (_, alone) = model.discriminate(&x.narrow(0, i, 1).unwrap()).unwrap();
        assert!((alone.to_vec1::<f32>().unwrap()[0] - g[i]).abs() < 1e-5);
        let mean = patches.get(i).unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((mean - g[i]).abs() < 1e-6);
    }
}

#[test]
fn every_parameter_gets_gradient_in_a_joint_step() {
    let model = toy_model(6);
    let ctx = Ctx::new(1);
    let weights = LossWeights::default();
    let x = images(&model, 4, 8);
    let labels = [0u32, 1, 2, 3];
    let logits = model.classify(&model.encode_identity(&x, Mode::Train).unwrap()).unwrap();
    let source = identity_loss(&logits, &labels, weights.label_smoothing).unwrap();

    let (x1, x2) = (images(&model, 2, 9), images(&model, 2, 10));
    let out = model.swap_generate(&x1, &x2, Mode::Train, QuadNoise::Independent, &ctx).unwrap();
    let fake = out.quad.stacked().unwrap();
    let real = Tensor::cat(&[&x1, &x2], 0).unwrap();
    let (real_p, _) = model.discriminate(&real).unwrap();
    let (fake_p, _) = model.discriminate(&fake.detach()).unwrap();
    let loss_d = adversarial_loss_d(&real_p, &fake_p).unwrap();
    let (fake_p, _) = model.discriminate(&fake).unwrap();
    let rec = reconstruction_loss(&out.quad, &x1, &x2, ReconTarget::ContentSource).unwrap();
    let [c1, c2] = &out.content;
    let kl = kl_loss(&Tensor::cat(&[&c1.mu, &c2.mu], 0).unwrap(), &Tensor::cat(&[&c1.logvar, &c2.logvar], 0).unwrap()).unwrap();
    let total = target_loss(&rec, &kl, &adversarial_loss_g(&fake_p).unwrap(), &weights).unwrap();

    let stores = [source.backward().unwrap(), loss_d.backward().unwrap(), total.backward().unwrap()];
    let params = model.params().trainable(&ALL_GROUPS);
    assert!(!params.is_empty());
    let dead: Vec<&str> = params
        .iter()
        .filter(|(_, var)| {
            !stores.iter().any(|g| g.get(var).is_some_and(|t| max_abs(&t.to_dtype(DType::F32).unwrap()) > 0.0))
        })
        .map(|(n, _)| n.as_str())
        .collect();
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(7);
    let meta = CheckpointMeta {
        stage: 1,
        epochs_completed: 3,
        model: model.config().clone(),
        config: serde_json::json!({"note": "round trip"}),
    };
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&a, &model, &meta).unwrap();
    let (loaded, loaded_meta) = udgan_core::nn::load_checkpoint(&a, &Device::Cpu).unwrap();
    assert_eq!(loaded_meta, meta);
    save_checkpoint(&b, &loaded, &loaded_meta).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let (_, tensors) = read_checkpoint(&a).unwrap();
    assert_eq!(tensors.len(), model.params().named().len());
    let x = images(&model, 2, 11);
    let before = model.encode_identity(&x, Mode::Eval).unwrap();
    let after = loaded.encode_identity(&x, Mode::Eval).unwrap();
    assert_eq!(max_abs(&(before - after).unwrap()), 0.0);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(8);
    let meta = CheckpointMeta { stage: 0, epochs_completed: 0, model: model.config().clone(), config: serde_json::Value::Null };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &meta).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let truncated = dir.path().join("short.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
    assert!(read_checkpoint(&truncated).is_err());
    bytes[0] ^= 0xff;
    let bad_magic = dir.path().join("magic.ckpt");
    std::fs::write(&bad_magic, &bytes).unwrap();
    assert!(read_checkpoint(&bad_magic).is_err());
}

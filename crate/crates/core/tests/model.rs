use ma3e::imageio::{generate_synthetic, DatasetSpec, Image};
use ma3e::model::{
    decode_checkpoint, embed_visible, encode, encode_checkpoint, forward, gradcheck, ModelConfig, ModelParams,
    Objective,
};
use ma3e::patching::{patchify, sample_mask, MaskLayout};
use ma3e::trainer::{prepare_sample, DatasetSource, FrozenPlanObjective, TrainConfig, TrainingSample};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model(depth: usize) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        p: 8,
        channels: 3,
        enc_dim: 16,
        enc_depth: depth,
        enc_heads: 2,
        dec_dim: 8,
        dec_depth: depth,
        dec_heads: 2,
        use_angle_embedding: true,
        seed: 0,
    }
}

fn tiny_train(depth: usize) -> TrainConfig {
    TrainConfig {
        dataset: DatasetSource::Synthetic(DatasetSpec::new(4, 32, 1)),
        a: 16,
        model: tiny_model(depth),
        ..TrainConfig::default()
    }
}

fn batch(cfg: &TrainConfig, n: usize, seed: u64) -> Vec<TrainingSample> {
    let DatasetSource::Synthetic(spec) = &cfg.dataset else {
        unreachable!()
    };
    let images = generate_synthetic(spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.iter().take(n).map(|img| prepare_sample(img, cfg, &mut rng).unwrap()).collect()
}

fn init(config: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_layout(n: usize, seed: u64) -> MaskLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = vec![5, 6, 9, 10];
    let bg: Vec<usize> = (0..n).filter(|k| !crop.contains(k)).collect();
    sample_mask(&crop, &bg, 0.5, 0.5, &mut rng).unwrap()
}

fn noise_patches(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.random::<f64>())
}

#[test]
fn angle_toggle_with_zero_embedding_is_exact() {
    let mut on = tiny_model(1);
    let mut params = init(&on, 1);
    params.angle_embed.fill(0.0);
    let layout = random_layout(16, 2);
    let patches = noise_patches(16, 192, 3);
    let (a, _) = forward(&patches, &layout, &params, &on).unwrap();
    on.use_angle_embedding = false;
    let (b, _) = forward(&patches, &layout, &params, &on).unwrap();
    assert_eq!(a, b);
}

#[test]
fn toggle_off_equals_forcing_the_embedding_to_zero() {
    let mut config = tiny_model(1);
    let params = init(&config, 4);
    let layout = random_layout(16, 5);
    let patches = noise_patches(16, 192, 6);
    config.use_angle_embedding = false;
    let off = embed_visible(&patches, &layout, &params, &config).unwrap();
    config.use_angle_embedding = true;
    let mut zeroed = params.clone();
    zeroed.angle_embed.fill(0.0);
    assert_eq!(off, embed_visible(&patches, &layout, &zeroed, &config).unwrap());
    // and with the toggle on, crop tokens carry exactly the embedding
    let on = embed_visible(&patches, &layout, &params, &config).unwrap();
    let diff = &on - &off;
    for (t, row) in diff.outer_iter().enumerate() {
        if t < layout.crop_visible.len() {
            for (d, e) in row.iter().zip(&params.angle_embed) {
                assert!((d - e).abs() <= 1e-15);
            }
        } else {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn token_count_at_224() {
    let config = ModelConfig {
        image_size: 224,
        p: 16,
        enc_dim: 16,
        enc_heads: 2,
        dec_dim: 8,
        dec_heads: 2,
        ..ModelConfig::default()
    };
    let params = init(&config, 0);
    let crop: Vec<usize> = (0..196).filter(|k| (4..10).contains(&(k / 14)) && (4..10).contains(&(k % 14))).collect();
    let bg: Vec<usize> = (0..196).filter(|k| !crop.contains(k)).collect();
    let layout = sample_mask(&crop, &bg, 0.75, 0.75, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tokens = embed_visible(&noise_patches(196, 768, 1), &layout, &params, &config).unwrap();
    assert_eq!(tokens.nrows(), 49);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let config = tiny_model(2);
    let params = init(&config, 7);
    let tokens = noise_patches(9, 16, 8);
    let perm = [4, 0, 8, 2, 6, 1, 7, 3, 5];
    let out = encode(&tokens, &params, &config).unwrap();
    let out_p = encode(&tokens.select(Axis(0), &perm), &params, &config).unwrap();
    for (i, &src) in perm.iter().enumerate() {
        for d in 0..16 {
            assert!((out_p[[i, d]] - out[[src, d]]).abs() <= 1e-6);
        }
    }
}

#[test]
fn depth_zero_encoder_normalizes_tokens() {
    let config = tiny_model(0);
    let params = init(&config, 9);
    let tokens = noise_patches(5, 16, 10);
    let out = encode(&tokens, &params, &config).unwrap();
    for (row, x) in out.outer_iter().zip(tokens.outer_iter()) {
        let mean = x.sum() / 16.0;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        for (o, v) in row.iter().zip(x) {
            assert!((o - (v - mean) / (var + 1e-6).sqrt()).abs() <= 1e-12);
        }
    }
}

#[test]
fn masked_pixels_do_not_reach_the_tokens() {
    let config = tiny_model(1);
    let params = init(&config, 11);
    let layout = random_layout(16, 12);
    let img = Image::new(32, 32, 3, noise_patches(1, 32 * 32 * 3, 13).into_raw_vec_and_offset().0).unwrap();
    let mut garbled = img.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for k in layout.crop_masked.iter().chain(&layout.bg_masked) {
        let (gr, gc) = (k / 4, k % 4);
        for r in gr * 8..gr * 8 + 8 {
            for c in gc * 8..gc * 8 + 8 {
                for ch in 0..3 {
                    garbled.set(r, c, ch, rng.random());
                }
            }
        }
    }
    let a = embed_visible(&patchify(&img, 8).unwrap().patches, &layout, &params, &config).unwrap();
    let b = embed_visible(&patchify(&garbled, 8).unwrap().patches, &layout, &params, &config).unwrap();
    assert_eq!(a, b);
    let (fa, _) = forward(&patchify(&img, 8).unwrap().patches, &layout, &params, &config).unwrap();
    let (fb, _) = forward(&patchify(&garbled, 8).unwrap().patches, &layout, &params, &config).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn forward_is_deterministic() {
    let config = tiny_model(2);
    let layout = random_layout(16, 15);
    let patches = noise_patches(16, 192, 16);
    let (a, _) = forward(&patches, &layout, &init(&config, 17), &config).unwrap();
    let (b, _) = forward(&patches, &layout, &init(&config, 17), &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradcheck_depth_zero() {
    let cfg = tiny_train(0);
    let samples = batch(&cfg, 2, 20);
    let params = init(&cfg.model_config(), 21);
    let objective = FrozenPlanObjective::new(&params, &samples, &cfg).unwrap();
    let report = gradcheck(&objective, &params, 200, 1e-3, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    assert!(report.checked >= 200);
    assert!(report.max_rel_error <= 1e-7, "{} at {}", report.max_rel_error, report.worst);
}

#[test]
fn gradcheck_with_blocks() {
    let cfg = tiny_train(1);
    let samples = batch(&cfg, 2, 23);
    let params = init(&cfg.model_config(), 24);
    let objective = FrozenPlanObjective::new(&params, &samples, &cfg).unwrap();
    let report = gradcheck(&objective, &params, 300, 1e-3, &mut ChaCha8Rng::seed_from_u64(25)).unwrap();
    assert!(report.checked >= 300);
    let groups = params.tensors().len();
    assert_eq!(report.per_group.len(), groups);
    assert!(report.max_rel_error <= 1e-4, "{} at {}", report.max_rel_error, report.worst);
}

#[test]
fn positional_tables_are_constants() {
    let cfg = tiny_train(1);
    let samples = batch(&cfg, 1, 26);
    let params = init(&cfg.model_config(), 27);
    assert!(params.tensors().iter().all(|(name, _, _)| !name.starts_with("pos_embed")));
    let objective = FrozenPlanObjective::new(&params, &samples, &cfg).unwrap();
    let base = objective.loss(&params).unwrap();
    let mut moved = params.clone();
    moved.pos_embed_enc[[0, 0]] += 0.5;
    moved.pos_embed_dec[[3, 1]] += 0.5;
    assert_ne!(objective.loss(&moved).unwrap(), base);
    let (_, grad) = objective.loss_and_grad(&params).unwrap();
    assert_eq!(grad.tensors().len(), params.tensors().len());
}

#[test]
fn sincos_tables_have_the_expected_layout() {
    let config = tiny_model(1);
    let params = init(&config, 0);
    let table = &params.pos_embed_enc;
    assert_eq!(table.dim(), (16, 16));
    // grid position (row 1, col 2): first half encodes the row, second the column
    let k = 4 + 2;
    let quarter = 4;
    for i in 0..quarter {
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        assert!((table[[k, i]] - (1.0 * omega).sin()).abs() < 1e-12);
        assert!((table[[k, quarter + i]] - (1.0 * omega).cos()).abs() < 1e-12);
        assert!((table[[k, 8 + i]] - (2.0 * omega).sin()).abs() < 1e-12);
        assert!((table[[k, 12 + i]] - (2.0 * omega).cos()).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let cfg = tiny_train(1);
    let params = init(&cfg.model_config(), 30);
    let bytes = encode_checkpoint(&cfg.to_text(), &params);
    let ck = decode_checkpoint(&bytes).unwrap();
    assert_eq!(ck.model_config, cfg.model_config());
    for ((name, shape, a), (_, shape_b, b)) in params.tensors().iter().zip(ck.params.tensors()) {
        assert_eq!(shape, &shape_b, "{name}");
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }

    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    assert!(decode_checkpoint(&bad_version).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(decode_checkpoint(&bad_magic).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());

    // parameters from a wider model do not fit the recorded config
    let mut wide = cfg.clone();
    wide.model.enc_dim = 32;
    let wide_params = init(&wide.model_config(), 31);
    let mismatched = encode_checkpoint(&cfg.to_text(), &wide_params);
    assert!(decode_checkpoint(&mismatched).is_err());
}

#[test]
fn pred_head_bias_only() {
    let config = tiny_model(1);
    let mut params = init(&config, 32);
    params.pred_head.weight.fill(0.0);
    params.pred_head.bias = Array1::from_shape_fn(192, |i| i as f64 / 192.0);
    let (out, _) = forward(&noise_patches(16, 192, 33), &random_layout(16, 34), &params, &config).unwrap();
    for row in out.predictions.outer_iter() {
        assert_eq!(row, params.pred_head.bias);
    }
}

mod common;

use std::collections::BTreeMap;

use common::{
    all_coords, loss_and_grads, model_fd_error, perturbed_model as perturbed, random_mask, rng, tiny_model_config as tiny,
    uniform, FD_REL_TOL,
};
use rand::Rng;
use switchaux::losses::LossWiring;
use switchaux::model::{load_checkpoint, save_checkpoint, BlockType, ModelConfig, ParamGroup, Predictor, SegModel};
use switchaux::tensor::Tensor;

#[test]
fn full_tiny_model_matches_finite_differences_everywhere() {
    for (block, seed) in [(BlockType::Attention, 1), (BlockType::Conv, 2)] {
        let model = perturbed(tiny(block), seed);
        let mut r = rng(seed + 10);
        let image = uniform(&mut r, &[3, 32, 32], 0.0, 1.0);
        let mask = random_mask(&mut r, &[1, 32, 32], 0.3);
        let coords = all_coords(&model);
        for wiring in [LossWiring::main_only(), LossWiring::with_aux(2, 0.7)] {
            let err = model_fd_error(&model, &image, &mask, wiring, &coords);
            assert!(err < FD_REL_TOL, "{block}: worst rel error {err}");
        }
    }
}

#[test]
fn default_model_matches_finite_differences_on_sampled_coordinates() {
    let model = perturbed(ModelConfig::default(), 3);
    let mut r = rng(4);
    let image = uniform(&mut r, &[3, 64, 64], 0.0, 1.0);
    let mask = random_mask(&mut r, &[1, 64, 64], 0.2);
    let mut coords = Vec::new();
    for (p, t) in model.params().iter().enumerate() {
        for _ in 0..2 {
            coords.push((p, r.random_range(0..t.value.len())));
        }
    }
    let err = model_fd_error(&model, &image, &mask, LossWiring::with_aux(1, 1.0), &coords);
    assert!(err < FD_REL_TOL, "worst rel error {err}");
}

#[test]
fn stage_sizes_follow_strides() {
    let model = SegModel::new(ModelConfig::default()).unwrap();
    for (side, expected) in [(64, [16, 8, 4, 2]), (96, [24, 12, 6, 3])] {
        let feats = model.encoder_forward(&Tensor::zeros(&[3, side, side])).unwrap();
        let sizes: Vec<usize> = feats.iter().map(|f| f.shape()[1]).collect();
        assert_eq!(sizes, expected);
        let channels: Vec<usize> = feats.iter().map(|f| f.shape()[0]).collect();
        assert_eq!(channels, [16, 32, 64, 96]);
    }
    assert!(model.encoder_forward(&Tensor::zeros(&[3, 48, 48])).is_err());
    assert!(model.encoder_forward(&Tensor::zeros(&[1, 64, 64])).is_err());
}

#[test]
fn block_types_share_output_shapes() {
    let mut r = rng(5);
    let image = uniform(&mut r, &[3, 64, 64], 0.0, 1.0);
    let attn = SegModel::new(ModelConfig::default()).unwrap();
    let conv = SegModel::new(ModelConfig {
        block_type: BlockType::Conv,
        ..ModelConfig::default()
    })
    .unwrap();
    let fa = attn.encoder_forward(&image).unwrap();
    let fc = conv.encoder_forward(&image).unwrap();
    for (a, c) in fa.iter().zip(&fc) {
        assert_eq!(a.shape(), c.shape());
    }
    let (ma, aa) = attn.model_forward(&image, &[1, 2, 3, 4]).unwrap();
    let (mc, ac) = conv.model_forward(&image, &[1, 2, 3, 4]).unwrap();
    assert_eq!(ma.shape(), mc.shape());
    for k in 1..=4 {
        assert_eq!(aa[&k].shape(), ac[&k].shape());
    }
}

#[test]
fn aux_head_examples() {
    let model = SegModel::new(ModelConfig::default()).unwrap();
    let zero = model.aux_head_forward(&Tensor::zeros(&[32, 8, 8]), 2).unwrap();
    assert_eq!(zero.shape(), &[1, 8, 8]);
    assert!(zero.values().iter().all(|&v| v == 0.0));
    assert!(model.aux_head_forward(&Tensor::zeros(&[32, 8, 8]), 0).is_err());
    assert!(model.aux_head_forward(&Tensor::zeros(&[32, 8, 8]), 5).is_err());
    assert!(model.aux_head_forward(&Tensor::zeros(&[16, 8, 8]), 2).is_err());

    let mut r = rng(6);
    let image = uniform(&mut r, &[3, 64, 64], 0.0, 1.0);
    let (main, aux) = model.model_forward(&image, &[2]).unwrap();
    assert_eq!(main.shape(), &[1, 64, 64]);
    assert_eq!(aux.keys().copied().collect::<Vec<_>>(), vec![2]);
    assert_eq!(aux[&2].shape(), &[1, 8, 8]);
}

#[test]
fn forward_is_pure() {
    let model = SegModel::new(ModelConfig::default()).unwrap();
    let mut r = rng(7);
    let image = uniform(&mut r, &[3, 64, 64], 0.0, 1.0);
    let a = model.model_forward(&image, &[1, 3]).unwrap();
    let b = model.model_forward(&image, &[1, 3]).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.predict_logits(&image).unwrap(), a.0);
}

/// Which parameter groups receive a nonzero gradient.
fn reached_groups(model: &SegModel) -> BTreeMap<String, bool> {
    let mut out = BTreeMap::new();
    for (i, p) in model.params().iter().enumerate() {
        let key = format!("{:?}", model.param_group(i));
        let nonzero = p.value.grad.as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0));
        *out.entry(key).or_insert(false) |= nonzero;
    }
    out
}

#[test]
fn detached_aux_loss_reaches_exactly_the_stages_up_to_its_tap() {
    let mut r = rng(8);
    let image = uniform(&mut r, &[3, 64, 64], 0.0, 1.0);
    let mask = random_mask(&mut r, &[1, 64, 64], 0.3);
    for stage in 1..=4 {
        let mut model = SegModel::new(ModelConfig::default()).unwrap();
        let wiring = LossWiring {
            detach_main: true,
            ..LossWiring::with_aux(stage, 1.0)
        };
        loss_and_grads(&mut model, &image, &mask, wiring);
        let reached = reached_groups(&model);
        for k in 1..=4 {
            assert_eq!(reached[&format!("{:?}", ParamGroup::Stage(k))], k <= stage, "tap {stage}, stage {k}");
            let head = format!("{:?}", ParamGroup::AuxHead(k));
            assert_eq!(reached.get(&head).copied().unwrap_or(false), k == stage);
        }
        assert!(!reached[&format!("{:?}", ParamGroup::Decoder)]);
        let norms = model.stage_grad_norms();
        assert!(norms.iter().skip(stage).all(|&n| n == 0.0));
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let model = perturbed(ModelConfig::default(), 9);
    let mut meta = BTreeMap::new();
    meta.insert("regime".to_string(), "switched:2:1:0.5".to_string());
    save_checkpoint(&path, &model, meta.clone()).unwrap();
    let (back, back_meta) = load_checkpoint(&path).unwrap();
    assert_eq!(back_meta, meta);
    let mut r = rng(10);
    let image = uniform(&mut r, &[3, 64, 64], 0.0, 1.0);
    assert_eq!(back.predict_logits(&image).unwrap(), model.predict_logits(&image).unwrap());
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert!(size > model.param_count() * 8);
}

//! Whole-model invariants: permutation robustness, shape contracts,
//! unimodal independence, and live gradients for every parameter.

mod common;

use common::random_cloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmfnet::autodiff::Tape;
use xmfnet::geometry::PointCloud;
use xmfnet::losses::{chamfer_l1, chamfer_l1_val};
use xmfnet::model::{ModelConfig, XmfNet};
use xmfnet::render::RgbImage;

fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::constant(h, w, [0.0; 3]);
    for v in img.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    img
}

#[test]
fn completion_shape_contract_both_presets() {
    // Toy preset end to end; the full-scale preset is checked at the
    // encoder/decoder level in the acceptance suite.
    let cfg = ModelConfig::toy();
    let net = XmfNet::init(cfg.clone(), 11).unwrap();
    let x = random_cloud(cfg.n_points, 1);
    let img = random_image(64, 64, 2);
    let out = net.complete(&x, Some(&img), 0).unwrap();
    assert_eq!(out.len(), cfg.n_points);
}

#[test]
fn permuting_input_leaves_output_unchanged_up_to_chamfer_zero() {
    let cfg = ModelConfig::toy();
    let net = XmfNet::init(cfg.clone(), 5).unwrap();
    let x = random_cloud(cfg.n_points, 3);
    let img = random_image(64, 64, 4);
    let out1 = net.complete(&x, Some(&img), 0).unwrap();

    // Reverse the point order and remap the farthest-point seed to the same
    // physical point.
    let n = x.len();
    let perm: Vec<usize> = (0..n).rev().collect();
    let xp = x.select(&perm);
    let seed_new = n - 1;
    let out2 = net.complete(&xp, Some(&img), seed_new).unwrap();

    let cd = chamfer_l1_val(&out1, &out2).unwrap();
    assert!(cd <= 1e-9, "outputs differ under permutation: CD {cd}");
}

#[test]
fn every_parameter_receives_nonzero_gradient() {
    let cfg = ModelConfig::toy();
    let net = XmfNet::init(cfg.clone(), 7).unwrap();
    let x = random_cloud(cfg.n_points, 8);
    let img = random_image(64, 64, 9);
    let target = random_cloud(cfg.n_points, 10);

    let tape = Tape::new();
    let bound = net.params.bind(&tape);
    let out = net
        .complete_on_tape(&tape, &bound, &x, Some(&img), 0)
        .unwrap();
    let loss = chamfer_l1(&target, &out).unwrap();
    tape.backward(&loss).unwrap();

    let grads = bound.grads();
    let mut dead = Vec::new();
    for (name, g) in &grads {
        if g.iter().all(|&v| v == 0.0) {
            dead.push(name.clone());
        }
    }
    assert!(dead.is_empty(), "parameters with zero gradient: {dead:?}");
}

#[test]
fn unimodal_mode_ignores_the_image_bitwise() {
    let mut cfg = ModelConfig::toy();
    cfg.unimodal = true;
    let net = XmfNet::init(cfg.clone(), 13).unwrap();
    let x = random_cloud(cfg.n_points, 14);
    let out_none = net.complete(&x, None, 0).unwrap();
    let out_img = net
        .complete(&x, Some(&random_image(64, 64, 15)), 0)
        .unwrap();
    for (a, b) in out_none.points().iter().zip(out_img.points()) {
        for k in 0..3 {
            assert_eq!(a[k].to_bits(), b[k].to_bits());
        }
    }
}

#[test]
fn checkpoint_roundtrip_preserves_inference_bitwise() {
    let cfg = ModelConfig::toy();
    let net = XmfNet::init(cfg.clone(), 21).unwrap();
    let dir = std::env::temp_dir().join("xmf_model_ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.ckpt");
    xmfnet::autodiff::save_checkpoint(&net.params, &path).unwrap();
    let loaded = xmfnet::autodiff::load_checkpoint(&path).unwrap();
    let net2 = XmfNet::with_params(cfg.clone(), loaded, 21).unwrap();

    let x = random_cloud(cfg.n_points, 22);
    let img = random_image(64, 64, 23);
    let a = net.complete(&x, Some(&img), 0).unwrap();
    let b = net2.complete(&x, Some(&img), 0).unwrap();
    assert_eq!(
        PointCloud::new(a.points().to_vec()),
        PointCloud::new(b.points().to_vec())
    );
}

#[test]
fn parallel_and_sequential_forward_are_bit_identical() {
    let cfg = ModelConfig::toy();
    let net = XmfNet::init(cfg.clone(), 31).unwrap();
    let x = random_cloud(cfg.n_points, 32);
    let img = random_image(64, 64, 33);
    let par = net.complete(&x, Some(&img), 0).unwrap();
    xmfnet::parallel::force_sequential(true);
    let seq = net.complete(&x, Some(&img), 0).unwrap();
    xmfnet::parallel::force_sequential(false);
    for (a, b) in par.points().iter().zip(seq.points()) {
        for k in 0..3 {
            assert_eq!(a[k].to_bits(), b[k].to_bits());
        }
    }
}

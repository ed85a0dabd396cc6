//! Finite-difference gradient verification for every differentiable
//! operation, probed at random coordinates away from non-smooth loci.

mod common;

use common::{check_gradient, random_cloud, random_values, values_away_from_zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmfnet::autodiff::{conv2d, Tape, Unary, Var};
use xmfnet::losses::{chamfer_l1, chamfer_weighted, dcd};
use xmfnet::render::{render_loss, Camera, RenderConfig, RgbImage};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

#[test]
fn matmul_gradients() {
    // Gradient wrt the left operand of sum(a*b), plain and transposed.
    let b_vals = random_values(12, 2);
    for (ta, tb, sa) in [(false, false, [3usize, 4]), (true, false, [4, 3]), (false, true, [3, 4])] {
        let vals = random_values(sa[0] * sa[1], 3);
        let b_vals = b_vals.clone();
        let r = check_gradient(
            move |tape, a| {
                let bshape = if tb { vec![3, 4] } else { vec![4, 3] };
                let b = tape.constant(bshape, b_vals.clone()).unwrap();
                a.matmul_ex(&b, ta, tb).unwrap().sum(None).unwrap()
            },
            &sa,
            &vals,
            40,
            H,
            1e-6,
            7,
        );
        assert!(r.checked >= 35, "ta={ta} tb={tb}: too few probes");
    }
    // Gradient wrt the right operand.
    let a_vals = random_values(12, 5);
    let r = check_gradient(
        move |tape, b| {
            let a = tape.constant(vec![3, 4], a_vals.clone()).unwrap();
            a.matmul(b).unwrap().mul(&a.matmul(b).unwrap()).unwrap().sum(None).unwrap()
        },
        &[4, 2],
        &random_values(8, 6),
        40,
        H,
        TOL,
        8,
    );
    assert!(r.checked >= 35);
}

#[test]
fn affine_gradients() {
    let w_vals = random_values(15, 11);
    let b_vals = random_values(5, 12);
    let r = check_gradient(
        move |tape, x| {
            let w = tape.var(vec![3, 5], w_vals.clone()).unwrap();
            let b = tape.var(vec![5], b_vals.clone()).unwrap();
            let y = x.affine(&w, &b).unwrap();
            y.mul(&y).unwrap().sum(None).unwrap()
        },
        &[4, 3],
        &random_values(12, 13),
        40,
        H,
        TOL,
        14,
    );
    assert!(r.checked >= 35);
}

#[test]
fn softmax_gradients_both_axes() {
    for axis in [0usize, 1] {
        let weights = random_values(12, 20 + axis as u64);
        let r = check_gradient(
            move |tape, x| {
                let w = tape.constant(vec![3, 4], weights.clone()).unwrap();
                x.softmax(axis).unwrap().mul(&w).unwrap().sum(None).unwrap()
            },
            &[3, 4],
            &random_values(12, 21),
            50,
            H,
            1e-6,
            22,
        );
        assert!(r.checked >= 45, "axis {axis}");
    }
}

#[test]
fn elementwise_gradients() {
    let cases: Vec<(Unary, Vec<f64>)> = vec![
        (Unary::Relu, values_away_from_zero(24, 31)),
        (Unary::LeakyRelu(0.2), values_away_from_zero(24, 32)),
        (Unary::Exp, random_values(24, 33)),
        (Unary::Neg, random_values(24, 34)),
        (Unary::Tanh, random_values(24, 35)),
        (
            Unary::Sqrt,
            random_values(24, 36).iter().map(|v| v.abs() + 0.1).collect(),
        ),
        (Unary::Abs, values_away_from_zero(24, 37)),
        (Unary::Scale(-1.7), random_values(24, 38)),
        (Unary::Offset(0.9), random_values(24, 39)),
    ];
    for (kind, vals) in cases {
        let weights = random_values(24, 40);
        let r = check_gradient(
            move |tape, x| {
                let w = tape.constant(vec![24], weights.clone()).unwrap();
                x.unary(kind).mul(&w).unwrap().sum(None).unwrap()
            },
            &[24],
            &vals,
            30,
            H,
            TOL,
            41,
        );
        assert!(r.checked >= 25, "{kind:?}");
    }
}

#[test]
fn binary_gradients_with_broadcast() {
    // Tensor (.) tensor through both slots, plus a scalar broadcast.
    let other = random_values(12, 50);
    let r = check_gradient(
        move |tape, x| {
            let o = tape.var(vec![12], other.clone()).unwrap();
            let sum = x.add(&o).unwrap();
            let diff = x.sub(&o).unwrap();
            sum.mul(&diff).unwrap().sum(None).unwrap()
        },
        &[12],
        &random_values(12, 51),
        30,
        H,
        TOL,
        52,
    );
    assert!(r.checked >= 25);

    let r = check_gradient(
        |tape, s| {
            let big = tape
                .constant(vec![8], (1..=8).map(|v| v as f64 * 0.3).collect())
                .unwrap();
            big.mul(s).unwrap().mul(&big).unwrap().sum(None).unwrap()
        },
        &[1],
        &[0.7],
        10,
        H,
        TOL,
        53,
    );
    assert!(r.checked >= 9);
}

#[test]
fn reduce_gradients() {
    let r = check_gradient(
        |tape, x| {
            let s = x.sum(Some(1)).unwrap();
            let m = x.mean(Some(0)).unwrap().sum(None).unwrap();
            s.mul(&s).unwrap().sum(None).unwrap().add(&m).unwrap()
        },
        &[3, 5],
        &random_values(15, 60),
        40,
        H,
        TOL,
        61,
    );
    assert!(r.checked >= 35);

    // Max with well-separated entries, reduced over an axis and globally.
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.35).collect();
    for v in vals.iter_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let r = check_gradient(
        |tape, x| {
            let m1 = x.max(Some(0)).unwrap().sum(None).unwrap();
            let m2 = x.max(None).unwrap();
            m1.add(&m2).unwrap().add(&tape.constant(vec![1], vec![0.0]).unwrap()).unwrap()
        },
        &[3, 4],
        &vals,
        30,
        H,
        TOL,
        63,
    );
    assert!(r.checked >= 20);
}

#[test]
fn gather_concat_narrow_transpose_gradients() {
    let r = check_gradient(
        |tape, x| {
            let g = x.gather(&[2, 0, 2, 1]).unwrap();
            let t = g.transpose().unwrap();
            let n = t.narrow(1, 1, 2).unwrap();
            let c = Var::concat(&[&n, &n], 0).unwrap();
            let r = c.reshape(vec![2, 6]).unwrap();
            r.mul(&r).unwrap().sum(None).unwrap()
        },
        &[3, 3],
        &random_values(9, 70),
        40,
        H,
        TOL,
        71,
    );
    assert!(r.checked >= 35);
}

#[test]
fn layer_norm_gradients() {
    let gamma = random_values(6, 80).iter().map(|v| v + 2.0).collect::<Vec<_>>();
    let beta = random_values(6, 81);
    let weights = random_values(18, 82);
    let r = check_gradient(
        move |tape, x| {
            let g = tape.var(vec![6], gamma.clone()).unwrap();
            let b = tape.var(vec![6], beta.clone()).unwrap();
            let w = tape.constant(vec![3, 6], weights.clone()).unwrap();
            x.layer_norm(&g, &b, 1e-5).unwrap().mul(&w).unwrap().sum(None).unwrap()
        },
        &[3, 6],
        &random_values(18, 83),
        50,
        H,
        TOL,
        84,
    );
    assert!(r.checked >= 45);

    // Gamma and beta receive correct gradients too.
    let x_vals = random_values(18, 85);
    let r = check_gradient(
        move |tape, g| {
            let x = tape.constant(vec![3, 6], x_vals.clone()).unwrap();
            let b = tape.constant(vec![6], vec![0.1; 6]).unwrap();
            let y = x.layer_norm(g, &b, 1e-5).unwrap();
            y.mul(&y).unwrap().sum(None).unwrap()
        },
        &[6],
        &random_values(6, 86).iter().map(|v| v + 2.0).collect::<Vec<_>>(),
        20,
        H,
        TOL,
        87,
    );
    assert!(r.checked >= 18);
}

#[test]
fn conv2d_gradients() {
    let w_vals = random_values(2 * 2 * 9, 90);
    let b_vals = random_values(2, 91);
    // wrt input
    let r = check_gradient(
        move |tape, x| {
            let w = tape.var(vec![2, 2, 3, 3], w_vals.clone()).unwrap();
            let b = tape.var(vec![2], b_vals.clone()).unwrap();
            let y = conv2d(x, &w, &b, 2, 1).unwrap();
            y.mul(&y).unwrap().sum(None).unwrap()
        },
        &[2, 6, 6],
        &random_values(72, 92),
        50,
        H,
        TOL,
        93,
    );
    assert!(r.checked >= 45);

    // wrt kernel and bias
    let x_vals = random_values(72, 94);
    let r = check_gradient(
        move |tape, w| {
            let x = tape.constant(vec![2, 6, 6], x_vals.clone()).unwrap();
            let b = tape.constant(vec![2], vec![0.05, -0.02]).unwrap();
            let y = conv2d(&x, w, &b, 1, 1).unwrap();
            y.mul(&y).unwrap().sum(None).unwrap()
        },
        &[2, 2, 3, 3],
        &random_values(36, 95),
        40,
        H,
        TOL,
        96,
    );
    assert!(r.checked >= 35);
}

#[test]
fn chamfer_gradients() {
    // Unique nearest neighbors with margin: random clouds at this scale
    // almost surely qualify; the two-step-size filter catches the rest.
    let y = random_cloud(24, 100);
    let y2 = y.clone();
    let r = check_gradient(
        move |_tape, pred| chamfer_l1(&y2, pred).unwrap(),
        &[20, 3],
        &random_cloud(20, 101).to_flat(),
        60,
        H,
        TOL,
        102,
    );
    assert!(r.checked >= 50, "chamfer_l1 skipped too many probes");

    let y3 = y.clone();
    let r = check_gradient(
        move |_tape, pred| chamfer_weighted(&y3, pred, 0.25).unwrap(),
        &[20, 3],
        &random_cloud(20, 103).to_flat(),
        60,
        H,
        TOL,
        104,
    );
    assert!(r.checked >= 50, "chamfer_weighted skipped too many probes");
}

#[test]
fn dcd_gradients() {
    let y = random_cloud(16, 110);
    let r = check_gradient(
        move |_tape, pred| dcd(&y, pred, 7.5).unwrap(),
        &[12, 3],
        &random_cloud(12, 111).to_flat(),
        60,
        H,
        TOL,
        112,
    );
    assert!(r.checked >= 50, "dcd skipped too many probes");
}

#[test]
fn render_loss_gradients() {
    // Points whose splats straddle the target silhouette boundary: target
    // is the left half-plane, points scatter around the boundary column.
    let (h, w) = (24usize, 24);
    let cam = Camera {
        fx: 30.0,
        fy: 30.0,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        rot: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        trans: [0.0, 0.0, 2.0],
        height: h,
        width: w,
    };
    let mut target = RgbImage::constant(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w / 2 {
            for c in 0..3 {
                target.data[(c * h + y) * w + x] = 1.0;
            }
        }
    }
    let cfg = RenderConfig {
        rho: 0.15,
        ..RenderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let pts: Vec<f64> = (0..18)
        .flat_map(|_| {
            [
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.2..0.2),
            ]
        })
        .collect();
    let r = check_gradient(
        move |_tape, points| render_loss(points, &target, &cam, &cfg).unwrap().0,
        &[18, 3],
        &pts,
        120,
        H,
        1e-3,
        121,
    );
    // Rasterization has genuine selection boundaries; require most probes
    // to be smooth and all smooth ones to pass.
    assert!(r.checked >= 100, "render_loss: only {} smooth probes", r.checked);
}

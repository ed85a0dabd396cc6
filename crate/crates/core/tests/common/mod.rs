//! Shared test utilities: finite-difference gradient oracle and fixtures.
//!
//! The oracle only ever evaluates the forward pass, so it stays independent
//! of the backward implementation it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmfnet::autodiff::{Tape, Var};
use xmfnet::geometry::PointCloud;

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff<F>(f: &F, x: &[f64], i: usize, h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
}

/// Compare the tape gradient of `build` (a scalar-valued graph over one
/// input tensor) against central differences at `probes` random coordinates.
///
/// Probes where two step sizes disagree by more than 20% are treated as
/// sitting on a non-smooth locus and skipped; the caller bounds how many.
pub fn check_gradient<F>(
    build: F,
    shape: &[usize],
    values: &[f64],
    probes: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> GradCheck
where
    F: Fn(&Tape, &Var) -> Var,
{
    let forward = |x: &[f64]| -> f64 {
        let tape = Tape::new();
        let v = tape.var(shape.to_vec(), x.to_vec()).unwrap();
        build(&tape, &v).scalar_value()
    };

    let tape = Tape::new();
    let v = tape.var(shape.to_vec(), values.to_vec()).unwrap();
    let loss = build(&tape, &v);
    assert_eq!(loss.numel(), 1, "gradcheck target must be scalar");
    tape.backward(&loss).unwrap();
    let analytic = v.grad();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        checked: 0,
        skipped: 0,
        worst_rel: 0.0,
    };
    for _ in 0..probes {
        let i = rng.random_range(0..values.len());
        let fd = central_diff(&forward, values, i, h);
        let fd2 = central_diff(&forward, values, i, h / 2.0);
        let denom = fd.abs().max(fd2.abs()).max(1e-7);
        if (fd - fd2).abs() / denom > 0.2 {
            out.skipped += 1;
            continue;
        }
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-7);
        out.worst_rel = out.worst_rel.max(rel);
        out.checked += 1;
        assert!(
            rel <= tol,
            "coordinate {i}: finite difference {fd:.8e} vs analytic {:.8e} (rel {rel:.3e} > {tol:.0e})",
            analytic[i]
        );
    }
    out
}

/// Random values bounded away from zero (for kinked elementwise ops).
pub fn values_away_from_zero(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(0.1..1.5)
        })
        .collect()
}

pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect(),
    )
}

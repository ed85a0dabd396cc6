//! Point-set losses and metrics: L1 Chamfer distance, its asymmetrically
//! weighted variant, the density-aware Chamfer term, and F-score.
//!
//! The differentiable versions treat the first cloud as a fixed target and
//! differentiate with respect to the predicted cloud. Nearest-neighbor
//! assignments are recomputed from the current values and held fixed inside
//! one evaluation, the usual subgradient choice for min-based losses.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::{dist2, normalize_unit_sphere, PointCloud};
use crate::parallel;

/// Weights and thresholds for the loss family.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the prediction-to-target direction in the weighted Chamfer.
    pub beta: f64,
    /// Temperature of the density-aware Chamfer exponential.
    pub alpha: f64,
    /// Weight of the rendering loss in the image step.
    pub lambda: f64,
    /// Match radius of the F-score, in normalized Euclidean distance.
    pub fscore_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.75,
            alpha: 40.0,
            lambda: 0.15,
            fscore_threshold: 0.001,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0,1], got {}", self.beta)));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.fscore_threshold <= 0.0 {
            return Err(Error::Config(format!(
                "fscore threshold must be positive, got {}",
                self.fscore_threshold
            )));
        }
        Ok(())
    }
}

/// Index of the nearest target per query, ties to the lower index.
fn nearest_indices(queries: &[[f64; 3]], targets: &[[f64; 3]]) -> Vec<usize> {
    let mut out = vec![0usize; queries.len()];
    parallel::for_each_item(&mut out, |i, slot| {
        let q = queries[i];
        let mut best = 0usize;
        let mut best_d = dist2(q, targets[0]);
        for (j, t) in targets.iter().enumerate().skip(1) {
            let d = dist2(q, *t);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        *slot = best;
    });
    out
}

fn cloud_of_var(yhat: &Var) -> Result<Vec<[f64; 3]>> {
    let shape = yhat.shape();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::dimension(
            "point_loss",
            format!("prediction must be [n,3], got {shape:?}"),
        ));
    }
    if shape[0] == 0 {
        return Err(Error::size("point_loss", "empty prediction cloud"));
    }
    Ok(yhat
        .values()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

fn check_target(y: &PointCloud) -> Result<()> {
    if y.is_empty() {
        return Err(Error::size("point_loss", "empty target cloud"));
    }
    Ok(())
}

/// Distances from each predicted point to its matched target point, as a
/// differentiable `[n_pred]` vector.
fn dists_pred_to_target(y_rows: &[[f64; 3]], yhat: &Var, nn: &[usize]) -> Result<Var> {
    let tape = yhat.tape().clone();
    let matched: Vec<f64> = nn
        .iter()
        .flat_map(|&j| y_rows[j].iter().copied())
        .collect();
    let target = tape.constant(vec![nn.len(), 3], matched)?;
    let diff = yhat.sub(&target)?;
    let d2 = diff.mul(&diff)?.sum(Some(1))?;
    Ok(d2.sqrt())
}

/// Distances from each target point to its matched predicted point, routed
/// through a gather so gradients scatter back into the prediction.
fn dists_target_to_pred(y_rows: &[[f64; 3]], yhat: &Var, nn: &[usize]) -> Result<Var> {
    let tape = yhat.tape().clone();
    let picked = yhat.gather(nn)?;
    let flat: Vec<f64> = y_rows.iter().flat_map(|p| p.iter().copied()).collect();
    let target = tape.constant(vec![y_rows.len(), 3], flat)?;
    let diff = picked.sub(&target)?;
    let d2 = diff.mul(&diff)?.sum(Some(1))?;
    Ok(d2.sqrt())
}

/// L1 Chamfer distance, differentiable with respect to `yhat`. Each
/// direction is averaged over its own cloud's cardinality.
pub fn chamfer_l1(y: &PointCloud, yhat: &Var) -> Result<Var> {
    chamfer_weighted(y, yhat, 0.5).map(|t| t.scale(2.0))
}

/// Weighted Chamfer: `(1-beta)/(2N)` on the target-to-prediction direction
/// and `beta/(2N)` on the prediction-to-target direction.
pub fn chamfer_weighted(y: &PointCloud, yhat: &Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0,1], got {beta}")));
    }
    check_target(y)?;
    let pred = cloud_of_var(yhat)?;
    let y_rows = y.points();

    let nn_y_to_pred = nearest_indices(y_rows, &pred);
    let nn_pred_to_y = nearest_indices(&pred, y_rows);

    let d_fwd = dists_target_to_pred(y_rows, yhat, &nn_y_to_pred)?;
    let d_bwd = dists_pred_to_target(y_rows, yhat, &nn_pred_to_y)?;

    let t_fwd = d_fwd
        .sum(None)?
        .scale((1.0 - beta) / (2.0 * y_rows.len() as f64));
    let t_bwd = d_bwd.sum(None)?.scale(beta / (2.0 * pred.len() as f64));
    t_fwd.add(&t_bwd)
}

/// Density-aware Chamfer term: each per-point contribution saturates as
/// `1 - (1/N) exp(-alpha * d)`, averaged per direction.
pub fn dcd(y: &PointCloud, yhat: &Var, alpha: f64) -> Result<Var> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    check_target(y)?;
    let pred = cloud_of_var(yhat)?;
    let y_rows = y.points();
    let (ny, np) = (y_rows.len() as f64, pred.len() as f64);

    let nn_y_to_pred = nearest_indices(y_rows, &pred);
    let nn_pred_to_y = nearest_indices(&pred, y_rows);

    let d_fwd = dists_target_to_pred(y_rows, yhat, &nn_y_to_pred)?;
    let d_bwd = dists_pred_to_target(y_rows, yhat, &nn_pred_to_y)?;

    let term_fwd = d_fwd
        .scale(-alpha)
        .exp()
        .scale(-1.0 / ny)
        .offset(1.0)
        .sum(None)?
        .scale(1.0 / (2.0 * ny));
    let term_bwd = d_bwd
        .scale(-alpha)
        .exp()
        .scale(-1.0 / np)
        .offset(1.0)
        .sum(None)?
        .scale(1.0 / (2.0 * np));
    term_fwd.add(&term_bwd)
}

/// Value-only L1 Chamfer distance between two clouds.
pub fn chamfer_l1_val(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_target(a)?;
    check_target(b)?;
    let half = |from: &PointCloud, to: &PointCloud| -> f64 {
        let nn = nearest_indices(from.points(), to.points());
        let sum: f64 = from
            .points()
            .iter()
            .zip(&nn)
            .map(|(p, &j)| dist2(*p, to.point(j)).sqrt())
            .sum();
        sum / (2.0 * from.len() as f64)
    };
    Ok(half(a, b) + half(b, a))
}

/// F-score at threshold `tau`: harmonic mean of the fraction of predicted
/// points within `tau` of the target (precision) and vice versa (recall).
pub fn fscore(y: &PointCloud, yhat: &PointCloud, tau: f64) -> Result<f64> {
    check_target(y)?;
    check_target(yhat)?;
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let tau2 = tau * tau;
    let frac_within = |from: &PointCloud, to: &PointCloud| -> f64 {
        let nn = nearest_indices(from.points(), to.points());
        let hits = from
            .points()
            .iter()
            .zip(&nn)
            .filter(|(p, &j)| dist2(**p, to.point(j)) <= tau2)
            .count();
        hits as f64 / from.len() as f64
    };
    let precision = frac_within(yhat, y);
    let recall = frac_within(y, yhat);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Evaluation metrics in the reporting convention: Chamfer distance per
/// point scaled by 1e3 and F-score, both computed after normalizing each
/// cloud into the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub cd_e3: f64,
    pub fscore: f64,
}

pub fn eval_metrics(y: &PointCloud, yhat: &PointCloud, cfg: &LossConfig) -> Result<Metrics> {
    let (yn, _, _) = normalize_unit_sphere(y);
    let (pn, _, _) = normalize_unit_sphere(yhat);
    Ok(Metrics {
        cd_e3: chamfer_l1_val(&yn, &pn)? * 1e3,
        fscore: fscore(&yn, &pn, cfg.fscore_threshold)?,
    })
}

//! Self-attention graph pooling: score nodes with a one-channel graph conv,
//! keep the top fraction, gate kept features by tanh(score).

use super::edgeconv::edgeconv;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud};

pub struct PoolOutcome {
    /// Gated features of the kept nodes, in score order.
    pub feat: Var,
    /// Original indices of the kept nodes, highest score first.
    pub kept: Vec<usize>,
    /// Coordinates of the kept nodes.
    pub coords: PointCloud,
}

pub fn sag_pool(
    feat: &Var,
    coords: &PointCloud,
    ratio: f64,
    pool_knn_k: usize,
    w: &Var,
    b: &Var,
) -> Result<PoolOutcome> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("pool ratio {ratio} outside (0,1]")));
    }
    let n = feat.shape()[0];
    if coords.len() != n {
        return Err(Error::dimension(
            "sag_pool",
            format!("{} coordinates for {} feature rows", coords.len(), n),
        ));
    }
    let m = ((n as f64) * ratio).ceil() as usize;
    if m < 1 {
        return Err(Error::size("sag_pool", "pooling would keep zero nodes"));
    }

    let graph = knn(coords, pool_knn_k)?;
    let scores = edgeconv(feat, &graph, w, b)?; // [n, 1]

    // Rank by score, ties to the lower index.
    let score_vals = scores.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        score_vals[b]
            .partial_cmp(&score_vals[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let kept: Vec<usize> = order[..m].to_vec();

    let feat_kept = feat.gather(&kept)?;
    let gate = scores.gather(&kept)?.tanh();
    // Broadcast the per-row gate over feature columns via a rank-1 product.
    let f = feat.shape()[1];
    let ones = feat.tape().constant(vec![1, f], vec![1.0; f])?;
    let gated = feat_kept.mul(&gate.matmul(&ones)?)?;

    Ok(PoolOutcome {
        feat: gated,
        coords: coords.select(&kept),
        kept,
    })
}

//! Branched attention decoder: each branch projects the fused features to
//! its own subspace, produces per-point attention over the feature sites,
//! resamples, and maps to 3-D. Branch outputs are concatenated.

use super::ModelConfig;
use crate::autodiff::{BoundParams, Var};
use crate::error::Result;

/// Decode `[N_X, F]` fused features into `[N', 3]` points.
pub fn decode(h: &Var, cfg: &ModelConfig, bound: &BoundParams) -> Result<Var> {
    let mut branches = Vec::with_capacity(cfg.branches);
    for i in 0..cfg.branches {
        let pre = format!("dec.b{i}");
        let z = h
            .affine(bound.var(&format!("{pre}.proj0.w")), bound.var(&format!("{pre}.proj0.b")))?
            .relu()
            .affine(bound.var(&format!("{pre}.proj1.w")), bound.var(&format!("{pre}.proj1.b")))?;
        let logits = z
            .affine(bound.var(&format!("{pre}.dec0.w")), bound.var(&format!("{pre}.dec0.b")))?
            .relu()
            .affine(bound.var(&format!("{pre}.dec1.w")), bound.var(&format!("{pre}.dec1.b")))?;
        // Attention over the N_X sites, one distribution per generated point.
        let attn = logits.scale(cfg.decoder_logit_scale).softmax(0)?;
        let pooled = attn.matmul_tn(&z)?; // [M, F']
        branches.push(pooled.matmul(bound.var(&format!("{pre}.out.w")))?);
    }
    let refs: Vec<&Var> = branches.iter().collect();
    Var::concat(&refs, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{ModelConfig, XmfNet};

    fn feature_fixture(tape: &Tape, rows: usize, cols: usize) -> Var {
        let vals: Vec<f64> = (0..rows * cols).map(|i| ((i * 31 % 23) as f64) * 0.05 - 0.5).collect();
        tape.constant(vec![rows, cols], vals).unwrap()
    }

    #[test]
    fn toy_branch_arithmetic() {
        let cfg = ModelConfig::toy(); // K=4, M=64
        let net = XmfNet::init(cfg.clone(), 5).unwrap();
        let tape = Tape::new();
        let bound = net.params.bind(&tape);
        let h = feature_fixture(&tape, cfg.encoded_points(), cfg.fused_dim);
        let out = decode(&h, &cfg, &bound).unwrap();
        assert_eq!(out.shape(), vec![256, 3]);
    }

    #[test]
    fn single_site_features_still_decode() {
        // With one feature site the per-branch softmax is trivially 1 and
        // each output point is a linear map of that single feature.
        let cfg = ModelConfig::toy();
        let net = XmfNet::init(cfg.clone(), 5).unwrap();
        let tape = Tape::new();
        let bound = net.params.bind(&tape);
        let h = feature_fixture(&tape, 1, cfg.fused_dim);
        let out = decode(&h, &cfg, &bound).unwrap();
        assert_eq!(out.shape(), vec![cfg.n_decoded, 3]);
        assert!(out.values().iter().all(|v| v.is_finite()));
    }
}

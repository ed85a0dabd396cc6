//! Multihead attention and the pre-norm residual blocks used for fusion.

use crate::autodiff::{BoundParams, Var};
use crate::error::{Error, Result};

/// Scaled dot-product attention over already-projected `[n,F]` tensors,
/// split into `heads` column groups: per head,
/// `softmax(Q K^T / sqrt(F/heads)) V`, heads concatenated back.
pub fn multi_head_attention(q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
    let f = q.shape()[1];
    if f % heads != 0 {
        return Err(Error::Config(format!(
            "feature dim {f} not divisible by {heads} heads"
        )));
    }
    if k.shape() != v.shape() || k.shape()[1] != f {
        return Err(Error::dimension(
            "attention",
            format!("key/value shapes {:?}/{:?} incompatible with queries", k.shape(), v.shape()),
        ));
    }
    let d = f / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow(1, h * d, d)?;
        let kh = k.narrow(1, h * d, d)?;
        let vh = v.narrow(1, h * d, d)?;
        let scores = qh.matmul_nt(&kh)?.scale(scale);
        let attn = scores.softmax(1)?;
        outputs.push(attn.matmul(&vh)?);
    }
    let refs: Vec<&Var> = outputs.iter().collect();
    Var::concat(&refs, 1)
}

/// Pre-norm residual attention block: queries from `q_feat`, keys/values
/// from `kv_feat`, both layer-normalized first, output projected and added
/// back onto the queries. Parameter names live under `prefix`.
pub fn attention_block(
    q_feat: &Var,
    kv_feat: &Var,
    bound: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let ln_q = q_feat.layer_norm(
        bound.var(&format!("{prefix}.ln_q.gamma")),
        bound.var(&format!("{prefix}.ln_q.beta")),
        1e-5,
    )?;
    let ln_kv = kv_feat.layer_norm(
        bound.var(&format!("{prefix}.ln_kv.gamma")),
        bound.var(&format!("{prefix}.ln_kv.beta")),
        1e-5,
    )?;
    let q = ln_q.matmul(bound.var(&format!("{prefix}.wq")))?;
    let k = ln_kv.matmul(bound.var(&format!("{prefix}.wk")))?;
    let v = ln_kv.matmul(bound.var(&format!("{prefix}.wv")))?;
    let fused = multi_head_attention(&q, &k, &v, heads)?;
    let projected = fused.matmul(bound.var(&format!("{prefix}.wo")))?;
    q_feat.add(&projected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn rand_vals(n: usize, seed: u64) -> Vec<f64> {
        // Tiny deterministic generator for test fixtures.
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).max(1);
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 2000) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn singleton_kv_broadcasts_value() {
        // One key/value row: softmax over a single entry is 1, so every
        // query row receives exactly that value row.
        let tape = Tape::new();
        let q = tape.var(vec![3, 4], rand_vals(12, 5)).unwrap();
        let kv = tape.var(vec![1, 4], rand_vals(4, 9)).unwrap();
        let out = multi_head_attention(&q, &kv, &kv, 2).unwrap();
        let v = out.values();
        let kvv = kv.values();
        for row in 0..3 {
            assert_eq!(&v[row * 4..(row + 1) * 4], kvv.as_slice());
        }
    }

    #[test]
    fn permuting_kv_rows_leaves_output_unchanged() {
        let tape = Tape::new();
        let q = tape.var(vec![2, 4], rand_vals(8, 3)).unwrap();
        let kv_vals = rand_vals(16, 7);
        let kv = tape.var(vec![4, 4], kv_vals.clone()).unwrap();
        let out = multi_head_attention(&q, &kv, &kv, 2).unwrap().values();

        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| kv_vals[4 * i..4 * i + 4].to_vec())
            .collect();
        let kv_p = tape.var(vec![4, 4], permuted).unwrap();
        let out_p = multi_head_attention(&q, &kv_p, &kv_p, 2).unwrap().values();
        for (a, b) in out.iter().zip(&out_p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_queries_permutes_output_rows() {
        let tape = Tape::new();
        let q_vals = rand_vals(12, 11);
        let q = tape.var(vec![3, 4], q_vals.clone()).unwrap();
        let kv = tape.var(vec![5, 4], rand_vals(20, 2)).unwrap();
        let out = multi_head_attention(&q, &kv, &kv, 4).unwrap().values();

        let perm = [1usize, 2, 0];
        let q_p: Vec<f64> = perm
            .iter()
            .flat_map(|&i| q_vals[4 * i..4 * i + 4].to_vec())
            .collect();
        let qv = tape.var(vec![3, 4], q_p).unwrap();
        let out_p = multi_head_attention(&qv, &kv, &kv, 4).unwrap().values();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((out_p[new_row * 4 + c] - out[old_row * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_count_must_divide_dim() {
        let tape = Tape::new();
        let q = tape.var(vec![2, 6], rand_vals(12, 1)).unwrap();
        assert!(multi_head_attention(&q, &q, &q, 4).is_err());
        assert!(multi_head_attention(&q, &q, &q, 3).is_ok());
    }
}

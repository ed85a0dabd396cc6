//! Graph convolution over k-NN neighborhoods.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::KnnGraph;

/// Edge convolution: for every point i,
/// `h'_i = max_{j in N(i)} leaky_relu([h_i || h_j - h_i] * w + b)`,
/// maximized per output channel over the neighbors.
pub fn edgeconv(feat: &Var, graph: &KnnGraph, w: &Var, b: &Var) -> Result<Var> {
    let shape = feat.shape();
    if shape.len() != 2 {
        return Err(Error::dimension("edgeconv", format!("features must be [n,f], got {shape:?}")));
    }
    let (n, f) = (shape[0], shape[1]);
    if graph.len() != n {
        return Err(Error::dimension(
            "edgeconv",
            format!("graph over {} nodes, features over {}", graph.len(), n),
        ));
    }
    let ws = w.shape();
    if ws[0] != 2 * f {
        return Err(Error::dimension(
            "edgeconv",
            format!("weight rows {} must be twice the feature dim {}", ws[0], f),
        ));
    }
    let k = graph.k();
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let nbrs: Vec<usize> = graph.flat().iter().map(|&j| j as usize).collect();

    let h_i = feat.gather(&centers)?;
    let h_j = feat.gather(&nbrs)?;
    let edge = Var::concat(&[&h_i, &h_j.sub(&h_i)?], 1)?;
    let z = edge.affine(w, b)?.leaky_relu(0.2);
    let fout = ws[1];
    z.reshape(vec![n, k, fout])?.max(Some(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::geometry::{knn, PointCloud};

    #[test]
    fn identical_features_ignore_topology() {
        // With equal features the edge term vanishes, so any graph gives the
        // same output rows.
        let tape = Tape::new();
        let feat = tape.constant(vec![4, 2], vec![0.3, -0.7].repeat(4)).unwrap();
        let w = tape
            .var(vec![4, 3], (0..12).map(|i| 0.1 * i as f64).collect())
            .unwrap();
        let b = tape.var(vec![3], vec![0.05, -0.02, 0.0]).unwrap();

        let line = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ]);
        let square = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ]);
        let out1 = edgeconv(&feat, &knn(&line, 2).unwrap(), &w, &b).unwrap();
        let out2 = edgeconv(&feat, &knn(&square, 2).unwrap(), &w, &b).unwrap();
        assert_eq!(out1.values(), out2.values());
        // All rows equal as well.
        let v = out1.values();
        assert_eq!(&v[..3], &v[3..6]);
    }

    #[test]
    fn two_point_hand_evaluation() {
        // n=2, k=1: the only edge of point 0 is (h0, h1-h0). With an
        // identity-like weight picking out the inputs, the output is
        // computable by hand.
        let tape = Tape::new();
        let feat = tape.constant(vec![2, 1], vec![2.0, 5.0]).unwrap();
        // w maps [h, dh] -> [h + dh] (i.e. w = [[1],[1]]), bias 0.
        let w = tape.var(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let b = tape.var(vec![1], vec![0.0]).unwrap();
        let pc = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let out = edgeconv(&feat, &knn(&pc, 1).unwrap(), &w, &b).unwrap();
        // Row 0: h=2, dh=3 -> 5. Row 1: h=5, dh=-3 -> 2.
        assert_eq!(out.values(), vec![5.0, 2.0]);
    }

    #[test]
    fn permutation_equivariance() {
        let tape = Tape::new();
        let coords = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.2, 0.0],
            [0.3, 1.0, 0.5],
            [2.0, 2.0, 2.0],
            [0.9, 0.1, 1.4],
        ];
        let feats: Vec<f64> = (0..10).map(|i| (i as f64 * 0.77).sin()).collect();
        let w_vals: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();

        let feat = tape.constant(vec![5, 2], feats.clone()).unwrap();
        let w = tape.var(vec![4, 2], w_vals.clone()).unwrap();
        let b = tape.var(vec![2], vec![0.1, -0.1]).unwrap();
        let pc = PointCloud::new(coords.clone());
        let out = edgeconv(&feat, &knn(&pc, 2).unwrap(), &w, &b).unwrap().values();

        let perm = [3usize, 0, 4, 1, 2];
        let coords_p: Vec<[f64; 3]> = perm.iter().map(|&i| coords[i]).collect();
        let feats_p: Vec<f64> = perm
            .iter()
            .flat_map(|&i| feats[2 * i..2 * i + 2].to_vec())
            .collect();
        let tape2 = Tape::new();
        let feat_p = tape2.constant(vec![5, 2], feats_p).unwrap();
        let w2 = tape2.var(vec![4, 2], w_vals).unwrap();
        let b2 = tape2.var(vec![2], vec![0.1, -0.1]).unwrap();
        let out_p = edgeconv(
            &feat_p,
            &knn(&PointCloud::new(coords_p), 2).unwrap(),
            &w2,
            &b2,
        )
        .unwrap()
        .values();

        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(
                &out_p[2 * new_row..2 * new_row + 2],
                &out[2 * old_row..2 * old_row + 2]
            );
        }
    }
}

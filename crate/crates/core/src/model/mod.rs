//! The completion network: graph-convolutional point encoder, convolutional
//! image encoder, cross/self-attention fusion, and a branched attention
//! decoder whose output is concatenated with a farthest-point subsample of
//! the input.

mod attention;
mod decoder;
mod edgeconv;
mod image;
mod pool;

pub use attention::{attention_block, multi_head_attention};
pub use decoder::decode;
pub use edgeconv::edgeconv;
pub use image::encode_image;
pub use pool::{sag_pool, PoolOutcome};

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{fps, knn, PointCloud};
use crate::render::RgbImage;

/// Architecture hyperparameters.
///
/// Defaults follow the full-scale configuration; [`ModelConfig::toy`] is the
/// small preset used by the test suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input and output cardinality N.
    pub n_points: usize,
    /// Points produced by the decoder, N'.
    pub n_decoded: usize,
    /// Decoder branches K.
    pub branches: usize,
    /// Points per branch M, with K*M = N'.
    pub branch_points: usize,
    /// Point feature dimension F_X after encoding.
    pub pc_feat_dim: usize,
    /// Image feature dimension F_I.
    pub img_feat_dim: usize,
    /// Fused embedding size F.
    pub fused_dim: usize,
    /// Attention heads.
    pub heads: usize,
    /// Neighborhood size of the graph-conv layers.
    pub edgeconv_k: usize,
    /// Output feature dims of the graph-conv stages.
    pub edgeconv_dims: Vec<usize>,
    /// Node retention per pooling stage.
    pub pool_ratios: Vec<f64>,
    /// Neighborhood sizes of the pooling score layers.
    pub pool_knn_ks: Vec<usize>,
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of each stride-2 conv layer; the last equals F_I.
    pub image_channels: Vec<usize>,
    /// Per-branch feature width F'.
    pub branch_dim: usize,
    /// Cross+self attention stage pairs before the final merge.
    pub fusion_stages: usize,
    /// Temperature applied to the decoder attention logits.
    pub decoder_logit_scale: f64,
    /// Replace image cross-attention with self-attention and ignore images.
    pub unimodal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::paper()
    }
}

impl ModelConfig {
    /// Full-scale preset: N=2048 points, 224x224 images, F=256.
    pub fn paper() -> Self {
        ModelConfig {
            n_points: 2048,
            n_decoded: 1024,
            branches: 8,
            branch_points: 128,
            pc_feat_dim: 256,
            img_feat_dim: 256,
            fused_dim: 256,
            heads: 4,
            edgeconv_k: 20,
            edgeconv_dims: vec![128, 256],
            pool_ratios: vec![0.25, 0.25],
            pool_knn_ks: vec![16, 6],
            image_height: 224,
            image_width: 224,
            image_channels: vec![32, 64, 128, 256],
            branch_dim: 256,
            fusion_stages: 2,
            decoder_logit_scale: 1.0,
            unimodal: false,
        }
    }

    /// Desk-scale preset: N=512 points, 64x64 images, F=64.
    pub fn toy() -> Self {
        ModelConfig {
            n_points: 512,
            n_decoded: 256,
            branches: 4,
            branch_points: 64,
            pc_feat_dim: 64,
            img_feat_dim: 64,
            fused_dim: 64,
            heads: 4,
            edgeconv_k: 8,
            edgeconv_dims: vec![32, 64],
            pool_ratios: vec![0.25, 0.25],
            pool_knn_ks: vec![16, 6],
            image_height: 64,
            image_width: 64,
            image_channels: vec![16, 32, 48, 64],
            branch_dim: 64,
            fusion_stages: 2,
            decoder_logit_scale: 1.0,
            unimodal: false,
        }
    }

    /// Number of encoded point sites N_X for the configured input size.
    pub fn encoded_points(&self) -> usize {
        let mut n = self.n_points;
        for r in &self.pool_ratios {
            n = ((n as f64) * r).ceil() as usize;
        }
        n
    }

    /// Number of encoded image sites N_I.
    pub fn encoded_pixels(&self) -> usize {
        let s = 1usize << self.image_channels.len();
        (self.image_height / s) * (self.image_width / s)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.branches * self.branch_points != self.n_decoded {
            return err(format!(
                "branches * branch_points = {} must equal n_decoded {}",
                self.branches * self.branch_points,
                self.n_decoded
            ));
        }
        if self.fused_dim % self.heads != 0 {
            return err(format!(
                "fused_dim {} not divisible by heads {}",
                self.fused_dim, self.heads
            ));
        }
        if self.pool_ratios.len() != self.pool_knn_ks.len()
            || self.pool_ratios.len() != self.edgeconv_dims.len()
            || self.pool_ratios.is_empty()
        {
            return err("edgeconv_dims, pool_ratios and pool_knn_ks must have equal nonzero length".into());
        }
        if *self.edgeconv_dims.last().unwrap() != self.pc_feat_dim {
            return err(format!(
                "last edgeconv dim {} must equal pc_feat_dim {}",
                self.edgeconv_dims.last().unwrap(),
                self.pc_feat_dim
            ));
        }
        if self.pc_feat_dim != self.fused_dim {
            return err(format!(
                "pc_feat_dim {} must equal fused_dim {} (residual attention blocks)",
                self.pc_feat_dim, self.fused_dim
            ));
        }
        if self.image_channels.is_empty()
            || *self.image_channels.last().unwrap() != self.img_feat_dim
        {
            return err("last image channel count must equal img_feat_dim".into());
        }
        if self.n_decoded > self.n_points {
            return err(format!(
                "n_decoded {} exceeds n_points {}",
                self.n_decoded, self.n_points
            ));
        }
        let stride = 1usize << self.image_channels.len();
        if self.image_height % stride != 0 || self.image_width % stride != 0 {
            return err(format!(
                "image {}x{} not divisible by total conv stride {}",
                self.image_height, self.image_width, stride
            ));
        }
        if self.encoded_pixels() == 0 {
            return err("conv stack downsamples the image to nothing".into());
        }
        for r in &self.pool_ratios {
            if !(*r > 0.0 && *r <= 1.0) {
                return err(format!("pool ratio {r} outside (0,1]"));
            }
        }
        // Every stage must keep enough points for its neighborhoods.
        let mut n = self.n_points;
        for (s, (r, pk)) in self.pool_ratios.iter().zip(&self.pool_knn_ks).enumerate() {
            if n <= self.edgeconv_k {
                return err(format!("stage {s}: {n} points cannot support edgeconv_k {}", self.edgeconv_k));
            }
            if n <= *pk {
                return err(format!("stage {s}: {n} points cannot support pool_knn_k {pk}"));
            }
            n = ((n as f64) * r).ceil() as usize;
            if n < 1 {
                return err(format!("stage {s} pools away every point"));
            }
        }
        if self.fusion_stages == 0 {
            return err("fusion_stages must be at least 1".into());
        }
        Ok(())
    }
}

/// The completion model: a config plus its named parameters.
pub struct XmfNet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform Kaiming-style fan-in init, seeded per parameter name so layout
/// changes do not reshuffle unrelated tensors.
fn init_weight(seed: u64, name: &str, shape: Vec<usize>, fan_in: usize) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, values, true).expect("shape consistent")
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

fn ones(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![1.0; n], true).expect("shape consistent")
}

impl XmfNet {
    /// Build a model with freshly initialized parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();

        // Point encoder: graph-conv + pooling stages.
        let mut fin = 3usize;
        for (s, &fout) in cfg.edgeconv_dims.iter().enumerate() {
            p.insert(
                format!("pc.edge{s}.w"),
                init_weight(seed, &format!("pc.edge{s}.w"), vec![2 * fin, fout], 2 * fin),
            );
            p.insert(format!("pc.edge{s}.b"), zeros(vec![fout]));
            p.insert(
                format!("pc.pool{s}.w"),
                init_weight(seed, &format!("pc.pool{s}.w"), vec![2 * fout, 1], 2 * fout),
            );
            p.insert(format!("pc.pool{s}.b"), zeros(vec![1]));
            fin = fout;
        }

        // Image encoder, skipped entirely in unimodal mode.
        if !cfg.unimodal {
            let mut cin = 3usize;
            for (l, &cout) in cfg.image_channels.iter().enumerate() {
                p.insert(
                    format!("img.conv{l}.w"),
                    init_weight(
                        seed,
                        &format!("img.conv{l}.w"),
                        vec![cout, cin, 3, 3],
                        cin * 9,
                    ),
                );
                p.insert(format!("img.conv{l}.b"), zeros(vec![cout]));
                cin = cout;
            }
        }

        // Fusion blocks.
        let f = cfg.fused_dim;
        let kv_dim = if cfg.unimodal { f } else { cfg.img_feat_dim };
        let add_block = |p: &mut ParamStore, prefix: &str, q_dim: usize, kv: usize| {
            for (w, rows) in [("wq", q_dim), ("wk", kv), ("wv", kv), ("wo", f)] {
                let name = format!("{prefix}.{w}");
                p.insert(name.clone(), init_weight(seed, &name, vec![rows, f], rows));
            }
            p.insert(format!("{prefix}.ln_q.gamma"), ones(vec![q_dim]));
            p.insert(format!("{prefix}.ln_q.beta"), zeros(vec![q_dim]));
            p.insert(format!("{prefix}.ln_kv.gamma"), ones(vec![kv]));
            p.insert(format!("{prefix}.ln_kv.beta"), zeros(vec![kv]));
        };
        // Pre-norm stream: normalize the encoder embedding entering fusion so
        // per-site variation is not drowned by the block outputs.
        p.insert("fuse.input_ln.gamma".to_string(), ones(vec![f]));
        p.insert("fuse.input_ln.beta".to_string(), zeros(vec![f]));
        for s in 0..cfg.fusion_stages {
            add_block(&mut p, &format!("fuse.s{s}.cross"), f, kv_dim);
            add_block(&mut p, &format!("fuse.s{s}.self"), f, f);
        }
        add_block(&mut p, "fuse.final", f, f);

        // Decoder branches.
        let fp = cfg.branch_dim;
        for i in 0..cfg.branches {
            let pre = format!("dec.b{i}");
            p.insert(
                format!("{pre}.proj0.w"),
                init_weight(seed, &format!("{pre}.proj0.w"), vec![f, fp], f),
            );
            p.insert(format!("{pre}.proj0.b"), zeros(vec![fp]));
            p.insert(
                format!("{pre}.proj1.w"),
                init_weight(seed, &format!("{pre}.proj1.w"), vec![fp, fp], fp),
            );
            p.insert(format!("{pre}.proj1.b"), zeros(vec![fp]));
            p.insert(
                format!("{pre}.dec0.w"),
                init_weight(seed, &format!("{pre}.dec0.w"), vec![fp, fp], fp),
            );
            p.insert(format!("{pre}.dec0.b"), zeros(vec![fp]));
            p.insert(
                format!("{pre}.dec1.w"),
                init_weight(seed, &format!("{pre}.dec1.w"), vec![fp, cfg.branch_points], fp),
            );
            p.insert(format!("{pre}.dec1.b"), zeros(vec![cfg.branch_points]));
            // The final projection starts an order smaller than fan-in
            // scaling so the initial decoded cloud sits near the data scale
            // instead of far outside the unit sphere.
            let mut out_w = init_weight(seed, &format!("{pre}.out.w"), vec![fp, 3], fp);
            out_w.values_mut().iter_mut().for_each(|v| *v *= 0.125);
            p.insert(format!("{pre}.out.w"), out_w);
        }

        Ok(XmfNet { cfg, params: p })
    }

    /// Model with parameters loaded from a store (e.g. a checkpoint).
    pub fn with_params(cfg: ModelConfig, params: ParamStore, seed: u64) -> Result<Self> {
        let reference = XmfNet::init(cfg.clone(), seed)?;
        crate::autodiff::validate_against(&params, &reference.params)?;
        Ok(XmfNet { cfg, params })
    }

    /// Encode the partial cloud into localized features.
    pub fn encode_pointcloud(
        &self,
        x: &PointCloud,
        bound: &BoundParams,
        tape: &Tape,
    ) -> Result<(Var, PointCloud)> {
        let mut feat = tape.constant(vec![x.len(), 3], x.to_flat())?;
        let mut coords = x.clone();
        for s in 0..self.cfg.edgeconv_dims.len() {
            let graph = knn(&coords, self.cfg.edgeconv_k)?;
            feat = edgeconv(
                &feat,
                &graph,
                bound.var(&format!("pc.edge{s}.w")),
                bound.var(&format!("pc.edge{s}.b")),
            )?;
            let pooled = sag_pool(
                &feat,
                &coords,
                self.cfg.pool_ratios[s],
                self.cfg.pool_knn_ks[s],
                bound.var(&format!("pc.pool{s}.w")),
                bound.var(&format!("pc.pool{s}.b")),
            )?;
            feat = pooled.feat;
            coords = pooled.coords;
        }
        Ok((feat, coords))
    }

    /// Cross/self-attention fusion. `hi` must be `Some` unless unimodal.
    pub fn fuse(&self, hx: &Var, hi: Option<&Var>, bound: &BoundParams) -> Result<Var> {
        if !self.cfg.unimodal && hi.is_none() {
            return Err(Error::contract("fuse", "multimodal fusion needs image features"));
        }
        let heads = self.cfg.heads;
        let mut cur = hx.layer_norm(
            bound.var("fuse.input_ln.gamma"),
            bound.var("fuse.input_ln.beta"),
            1e-5,
        )?;
        let mut first_fused = None;
        for s in 0..self.cfg.fusion_stages {
            let cross = match hi {
                Some(h) if !self.cfg.unimodal => {
                    attention_block(&cur, h, bound, &format!("fuse.s{s}.cross"), heads)?
                }
                _ => attention_block(&cur, &cur.clone(), bound, &format!("fuse.s{s}.cross"), heads)?,
            };
            if s == 0 {
                first_fused = Some(cross.clone());
            }
            cur = attention_block(&cross, &cross, bound, &format!("fuse.s{s}.self"), heads)?;
        }
        let first = first_fused.expect("at least one fusion stage");
        attention_block(&cur, &first, bound, "fuse.final", heads)
    }

    /// Full forward pass on an existing tape. Returns the `[N,3]` output var.
    pub fn complete_on_tape(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        x: &PointCloud,
        img: Option<&RgbImage>,
        fps_seed: usize,
    ) -> Result<Var> {
        if x.len() != self.cfg.n_points {
            return Err(Error::contract(
                "complete",
                format!("input has {} points, config says {}", x.len(), self.cfg.n_points),
            ));
        }
        let (hx, _) = self.encode_pointcloud(x, bound, tape)?;
        let fused = if self.cfg.unimodal {
            self.fuse(&hx, None, bound)?
        } else {
            let img = img.ok_or_else(|| {
                Error::contract("complete", "multimodal completion needs an input image")
            })?;
            let hi = encode_image(img, &self.cfg, bound, tape)?;
            self.fuse(&hx, Some(&hi), bound)?
        };
        let decoded = decode(&fused, &self.cfg, bound)?;
        let tail_n = self.cfg.n_points - self.cfg.n_decoded;
        if tail_n == 0 {
            return Ok(decoded);
        }
        let idx = fps(x, tail_n, fps_seed)?;
        let tail = tape.constant(vec![tail_n, 3], x.select(&idx).to_flat())?;
        Var::concat(&[&decoded, &tail], 0)
    }

    /// Convenience inference on a fresh tape.
    pub fn complete(
        &self,
        x: &PointCloud,
        img: Option<&RgbImage>,
        fps_seed: usize,
    ) -> Result<PointCloud> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let out = self.complete_on_tape(&tape, &bound, x, img, fps_seed)?;
        PointCloud::from_flat(&out.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn paper_preset_site_counts() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.encoded_points(), 128);
        assert_eq!(cfg.encoded_pixels(), 196);
    }

    #[test]
    fn toy_preset_site_counts() {
        let cfg = ModelConfig::toy();
        assert_eq!(cfg.encoded_points(), 32);
        assert_eq!(cfg.encoded_pixels(), 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.branches = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::toy();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::toy();
        cfg.n_decoded = 1024;
        cfg.branch_points = 256;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = XmfNet::init(ModelConfig::toy(), 9).unwrap();
        let b = XmfNet::init(ModelConfig::toy(), 9).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t.values(), b.params.get(name).unwrap().values(), "{name}");
        }
        let c = XmfNet::init(ModelConfig::toy(), 10).unwrap();
        let w = "dec.b0.proj0.w";
        assert_ne!(a.params.get(w).unwrap().values(), c.params.get(w).unwrap().values());
    }

    #[test]
    fn unimodal_model_has_no_image_parameters() {
        let mut cfg = ModelConfig::toy();
        cfg.unimodal = true;
        let m = XmfNet::init(cfg, 1).unwrap();
        assert!(m.params.names().iter().all(|n| !n.starts_with("img.")));
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
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

    #[test]
    fn toy_complete_returns_exactly_n_points() {
        let cfg = ModelConfig::toy();
        let net = XmfNet::init(cfg.clone(), 2).unwrap();
        let x = random_cloud(cfg.n_points, 40);
        let img = RgbImage::constant(64, 64, [0.3, 0.1, 0.9]);
        let out = net.complete(&x, Some(&img), 0).unwrap();
        assert_eq!(out.len(), cfg.n_points);
        assert!(out.points().iter().all(|p| p.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn fps_tail_is_subset_of_input() {
        let cfg = ModelConfig::toy();
        let net = XmfNet::init(cfg.clone(), 2).unwrap();
        let x = random_cloud(cfg.n_points, 41);
        let img = RgbImage::constant(64, 64, [0.5; 3]);
        let out = net.complete(&x, Some(&img), 0).unwrap();
        let tail = &out.points()[cfg.n_decoded..];
        for p in tail {
            assert!(x.points().contains(p));
        }
    }

    #[test]
    fn unimodal_output_is_bitwise_independent_of_image() {
        let mut cfg = ModelConfig::toy();
        cfg.unimodal = true;
        let net = XmfNet::init(cfg.clone(), 7).unwrap();
        let x = random_cloud(cfg.n_points, 42);
        let a = net.complete(&x, None, 0).unwrap();
        let img = RgbImage::constant(64, 64, [0.9, 0.0, 0.4]);
        let b = net.complete(&x, Some(&img), 0).unwrap();
        for (pa, pb) in a.points().iter().zip(b.points()) {
            for k in 0..3 {
                assert_eq!(pa[k].to_bits(), pb[k].to_bits());
            }
        }
    }

    #[test]
    fn multimodal_requires_image() {
        let cfg = ModelConfig::toy();
        let net = XmfNet::init(cfg.clone(), 2).unwrap();
        let x = random_cloud(cfg.n_points, 43);
        assert!(net.complete(&x, None, 0).is_err());
    }
}

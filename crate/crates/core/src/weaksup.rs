//! Weakly-supervised training: no complete ground truth is ever read.
//!
//! Inputs are further-partialized copies of the stored partial clouds, which
//! then serve as their own pseudo-ground-truth. Pairs are mixed symmetrically
//! across both modalities. Optimization alternates strictly between a
//! weighted-Chamfer step on points and a step combining the density-aware
//! Chamfer with the silhouette rendering loss.

use rand::distr::Distribution;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Beta;

use crate::autodiff::{Adam, AdamConfig};
use crate::data::TrainSample;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{chamfer_weighted, dcd, LossConfig};
use crate::model::XmfNet;
use crate::render::{render_loss, Camera, RenderConfig, RgbImage};
use crate::train::{evaluate, EvalItem, LogRow, TrainLog, TrainOutcome};

/// Protocol settings for a weakly-supervised run.
#[derive(Debug, Clone)]
pub struct WeakConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Range of the removed fraction in the partialization cut.
    pub removal_range: (f64, f64),
    /// Mixup coefficient distribution parameters.
    pub mixup_beta: (f64, f64),
    pub use_rendering: bool,
    pub use_dcd: bool,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub render: RenderConfig,
    pub fps_seed: usize,
}

impl Default for WeakConfig {
    fn default() -> Self {
        WeakConfig {
            steps: 200,
            batch_size: 8,
            eval_every: 50,
            removal_range: (0.1, 0.4),
            mixup_beta: (1.0, 1.0),
            use_rendering: true,
            use_dcd: true,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            render: RenderConfig::default(),
            fps_seed: 0,
        }
    }
}

/// Remove a random directional cut of `x` and refill to its original size
/// by resampling the survivors with replacement.
pub fn resample_partial(
    x: &PointCloud,
    removal_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let n = x.len();
    let r = if removal_range.1 > removal_range.0 {
        rng.random_range(removal_range.0..removal_range.1)
    } else {
        removal_range.0
    };
    let remove = ((n as f64) * r).floor() as usize;
    if remove == 0 {
        return x.clone();
    }
    // Random cut direction; drop the `remove` points most extremal along it.
    let dir = loop {
        let v = [
            rng.random_range(-1.0..1.0f64),
            rng.random_range(-1.0..1.0f64),
            rng.random_range(-1.0..1.0f64),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-6 {
            let n = n2.sqrt();
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| {
        let p = x.point(i);
        p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]
    };
    order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).expect("finite").then(a.cmp(&b)));
    let survivors: Vec<usize> = order[remove..].to_vec();
    let kept = x.select(&survivors);
    // Refill to N with replacement from the survivors.
    let mut idx: Vec<usize> = (0..kept.len()).collect();
    idx.extend((0..n - kept.len()).map(|_| rng.random_range(0..kept.len())));
    kept.select(&idx)
}

/// One batch element of the weak protocol.
pub struct WeakItem {
    pub input: PointCloud,
    pub pseudo_gt: PointCloud,
    pub image: RgbImage,
    /// `Some` marks the rendering-eligible half: original un-augmented
    /// partials with their true cameras.
    pub camera: Option<Camera>,
}

pub struct WeakBatch {
    pub items: Vec<WeakItem>,
}

/// A training sample preloaded into memory.
pub struct WeakData {
    pub id: String,
    pub partial: PointCloud,
    pub image: RgbImage,
    pub camera: Camera,
}

pub fn preload_weak(samples: &[TrainSample]) -> Result<Vec<WeakData>> {
    samples
        .iter()
        .map(|s| {
            Ok(WeakData {
                id: s.id(),
                partial: s.partial()?,
                image: s.image()?,
                camera: s.camera()?,
            })
        })
        .collect()
}

/// Symmetric two-modality mixup: the same positional index sets select
/// points from both inputs and both pseudo-ground-truths, and the images
/// blend with the same coefficient.
pub fn mixup(
    a: (&PointCloud, &PointCloud, &RgbImage),
    b: (&PointCloud, &PointCloud, &RgbImage),
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(PointCloud, PointCloud, RgbImage)> {
    let n = a.0.len();
    if b.0.len() != n || a.1.len() != n || b.1.len() != n {
        return Err(Error::contract("mixup", "samples must share cardinality"));
    }
    if a.2.height != b.2.height || a.2.width != b.2.width {
        return Err(Error::contract("mixup", "images must share dimensions"));
    }
    let take_a = ((gamma * n as f64).floor() as usize).min(n);
    let idx_a = index_sample(rng, n, take_a).into_vec();
    let idx_b = index_sample(rng, n, n - take_a).into_vec();

    let mut input_pts = a.0.select(&idx_a).points().to_vec();
    input_pts.extend_from_slice(b.0.select(&idx_b).points());
    let mut pseudo_pts = a.1.select(&idx_a).points().to_vec();
    pseudo_pts.extend_from_slice(b.1.select(&idx_b).points());

    let mut img = RgbImage::constant(a.2.height, a.2.width, [0.0; 3]);
    for (o, (pa, pb)) in img
        .data
        .iter_mut()
        .zip(a.2.data.iter().zip(b.2.data.iter()))
    {
        *o = gamma * pa + (1.0 - gamma) * pb;
    }
    Ok((PointCloud::new(input_pts), PointCloud::new(pseudo_pts), img))
}

/// Which loss the next step optimizes. Alternation is strict: even steps
/// optimize points, odd steps optimize the image-side objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    PointCloud,
    Image,
}

pub fn step_kind(step: usize) -> StepKind {
    if step % 2 == 0 {
        StepKind::PointCloud
    } else {
        StepKind::Image
    }
}

fn augmented_item(data: &[WeakData], cfg: &WeakConfig, rng: &mut ChaCha8Rng) -> Result<WeakItem> {
    let ia = rng.random_range(0..data.len());
    let ib = rng.random_range(0..data.len());
    let (a, b) = (&data[ia], &data[ib]);
    let a_in = resample_partial(&a.partial, cfg.removal_range, rng);
    let b_in = resample_partial(&b.partial, cfg.removal_range, rng);
    let beta = Beta::new(cfg.mixup_beta.0, cfg.mixup_beta.1)
        .map_err(|e| Error::Config(format!("mixup beta: {e}")))?;
    let gamma: f64 = beta.sample(rng);
    let (input, pseudo, image) = mixup(
        (&a_in, &a.partial, &a.image),
        (&b_in, &b.partial, &b.image),
        gamma,
        rng,
    )?;
    Ok(WeakItem {
        input,
        pseudo_gt: pseudo,
        image,
        camera: None,
    })
}

/// Build a batch for one step. Point steps use augmented samples only;
/// image steps reserve half the batch for original partials with true
/// cameras, which is the only half the rendering loss sees.
pub fn build_batch(
    data: &[WeakData],
    cfg: &WeakConfig,
    kind: StepKind,
    rng: &mut ChaCha8Rng,
) -> Result<WeakBatch> {
    if data.is_empty() {
        return Err(Error::Config("weak training set is empty".into()));
    }
    let b = cfg.batch_size.max(2);
    let mut items = Vec::with_capacity(b);
    let originals = match kind {
        StepKind::PointCloud => 0,
        StepKind::Image => b / 2,
    };
    for _ in 0..b - originals {
        items.push(augmented_item(data, cfg, rng)?);
    }
    for _ in 0..originals {
        let i = rng.random_range(0..data.len());
        let d = &data[i];
        items.push(WeakItem {
            input: d.partial.clone(),
            pseudo_gt: d.partial.clone(),
            image: d.image.clone(),
            camera: Some(d.camera.clone()),
        });
    }
    Ok(WeakBatch { items })
}

/// One point-side step: weighted Chamfer against the pseudo-ground-truth,
/// averaged over the batch, then an Adam update.
pub fn step_pc(
    model: &mut XmfNet,
    adam: &mut Adam,
    batch: &WeakBatch,
    cfg: &WeakConfig,
    lr: f64,
) -> Result<f64> {
    let inv_b = 1.0 / batch.items.len() as f64;
    let (val, grads) =
        crate::train::batched_backward(&model.params, &batch.items, |tape, bound, item| {
            let img = if model.cfg.unimodal { None } else { Some(&item.image) };
            let out = model.complete_on_tape(tape, bound, &item.input, img, cfg.fps_seed)?;
            Ok(chamfer_weighted(&item.pseudo_gt, &out, cfg.loss.beta)?.scale(inv_b))
        })?;
    if !val.is_finite() {
        return Err(Error::Divergence(format!("point-step loss {val}")));
    }
    adam.step(&mut model.params, &grads, lr)?;
    Ok(val)
}

/// One image-side step: density-aware Chamfer over the full batch plus the
/// rendering loss on the original-partial half, then an Adam update.
pub fn step_img(
    model: &mut XmfNet,
    adam: &mut Adam,
    batch: &WeakBatch,
    cfg: &WeakConfig,
    lr: f64,
) -> Result<f64> {
    let inv_b = 1.0 / batch.items.len() as f64;
    let render_count = batch.items.iter().filter(|i| i.camera.is_some()).count();
    let render_on = cfg.use_rendering && cfg.loss.lambda > 0.0 && render_count > 0;
    let render_w = if render_on {
        cfg.loss.lambda / render_count as f64
    } else {
        0.0
    };
    let (val, grads) =
        crate::train::batched_backward(&model.params, &batch.items, |tape, bound, item| {
            let img = if model.cfg.unimodal { None } else { Some(&item.image) };
            let out = model.complete_on_tape(tape, bound, &item.input, img, cfg.fps_seed)?;
            let pt = if cfg.use_dcd {
                dcd(&item.pseudo_gt, &out, cfg.loss.alpha)?
            } else {
                chamfer_weighted(&item.pseudo_gt, &out, cfg.loss.beta)?
            };
            let mut loss = pt.scale(inv_b);
            if render_on {
                if let Some(cam) = &item.camera {
                    let (rl, _) = render_loss(&out, &item.image, cam, &cfg.render)?;
                    loss = loss.add(&rl.scale(render_w))?;
                }
            }
            Ok(loss)
        })?;
    if !val.is_finite() {
        return Err(Error::Divergence(format!("image-step loss {val}")));
    }
    adam.step(&mut model.params, &grads, lr)?;
    Ok(val)
}

/// Run the alternating weak-supervision protocol. Evaluation (and only
/// evaluation) uses held-out complete clouds.
pub fn train_weak(
    model: &mut XmfNet,
    train: &[WeakData],
    eval: &[EvalItem],
    cfg: &WeakConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("weak training set is empty".into()));
    }
    cfg.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut log = TrainLog::default();
    let mut best_cd = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut final_loss = f64::NAN;
    let steps_per_epoch = (train.len().div_ceil(cfg.batch_size)).max(1);

    for step in 0..cfg.steps {
        let kind = step_kind(step);
        let batch = build_batch(train, cfg, kind, &mut rng)?;
        let lr = adam.lr_at_epoch(step / steps_per_epoch);
        let (loss_type, loss_val) = match kind {
            StepKind::PointCloud => ("pc", step_pc(model, &mut adam, &batch, cfg, lr)?),
            StepKind::Image => ("img", step_img(model, &mut adam, &batch, cfg, lr)?),
        };
        final_loss = loss_val;

        let do_eval = !eval.is_empty()
            && cfg.eval_every > 0
            && (step % cfg.eval_every == cfg.eval_every - 1 || step + 1 == cfg.steps);
        let (mut cd, mut fs) = (None, None);
        if do_eval {
            let (c, f) = evaluate(model, eval, &cfg.loss, cfg.fps_seed)?;
            cd = Some(c);
            fs = Some(f);
            if c < best_cd {
                best_cd = c;
                best_params = model.params.clone();
            }
        }
        log.rows.push(LogRow {
            step,
            loss_type,
            loss: loss_val,
            eval_cd_e3: cd,
            eval_fscore: fs,
        });
    }

    if best_cd.is_infinite() {
        best_params = model.params.clone();
    }
    Ok(TrainOutcome {
        log,
        best_params,
        best_eval_cd: best_cd.is_finite().then_some(best_cd),
        final_train_loss: final_loss,
    })
}

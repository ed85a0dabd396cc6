//! Supervised training and shared training infrastructure.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape};
use crate::data::{Dataset, SampleHandle, Split};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{chamfer_l1, eval_metrics, LossConfig};
use crate::model::XmfNet;
use crate::render::{Camera, RgbImage};

/// One preloaded supervised sample.
pub struct SupItem {
    pub id: String,
    pub partial: PointCloud,
    pub image: RgbImage,
    pub complete: PointCloud,
}

/// One preloaded evaluation sample.
pub struct EvalItem {
    pub id: String,
    pub partial: PointCloud,
    pub image: RgbImage,
    pub camera: Camera,
    pub complete: PointCloud,
}

pub fn preload_supervised(handles: &[SampleHandle]) -> Result<Vec<SupItem>> {
    handles
        .iter()
        .map(|h| {
            Ok(SupItem {
                id: h.id(),
                partial: h.partial()?,
                image: h.image()?,
                complete: h.complete()?,
            })
        })
        .collect()
}

pub fn preload_eval(handles: &[SampleHandle]) -> Result<Vec<EvalItem>> {
    handles
        .iter()
        .map(|h| {
            Ok(EvalItem {
                id: h.id(),
                partial: h.partial()?,
                image: h.image()?,
                camera: h.camera()?,
                complete: h.complete()?,
            })
        })
        .collect()
}

/// Open `root` and preload the requested split for evaluation.
pub fn load_eval_split(root: &std::path::Path, split: Split) -> Result<Vec<EvalItem>> {
    let ds = Dataset::open(root)?;
    preload_eval(&ds.samples(split))
}

/// One row of the training log CSV
/// (`step,loss_type,loss,eval_cd_e3,eval_fscore`).
#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub loss_type: &'static str,
    pub loss: f64,
    pub eval_cd_e3: Option<f64>,
    pub eval_fscore: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss_type,loss,eval_cd_e3,eval_fscore\n");
        for r in &self.rows {
            let cd = r.eval_cd_e3.map(|v| format!("{v:.6}")).unwrap_or_default();
            let f = r.eval_fscore.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{},{:.8},{},{}\n", r.step, r.loss_type, r.loss, cd, f));
        }
        s
    }

    /// Mean evaluation CD of the final logged evaluation.
    pub fn last_eval_cd(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_cd_e3)
    }
}

/// Mean evaluation metrics of `model` over `eval` samples. Samples run on
/// their own tapes, in parallel when enabled.
pub fn evaluate(
    model: &XmfNet,
    eval: &[EvalItem],
    loss_cfg: &LossConfig,
    fps_seed: usize,
) -> Result<(f64, f64)> {
    if eval.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let metrics = crate::parallel::map_collect(eval, |_, item| {
        let img = if model.cfg.unimodal { None } else { Some(&item.image) };
        let out = model.complete(&item.partial, img, fps_seed)?;
        eval_metrics(&item.complete, &out, loss_cfg)
    });
    let mut cd_sum = 0.0;
    let mut f_sum = 0.0;
    for m in metrics {
        let m = m?;
        cd_sum += m.cd_e3;
        f_sum += m.fscore;
    }
    Ok((cd_sum / eval.len() as f64, f_sum / eval.len() as f64))
}

/// Run per-sample forward/backward closures on separate tapes (parallel when
/// enabled), then sum the already-scaled losses and gradients in sample
/// order. Distinct graphs on distinct threads keep every result
/// bit-deterministic.
pub(crate) fn batched_backward<T, F>(
    params: &crate::autodiff::ParamStore,
    items: &[T],
    per_sample: F,
) -> Result<(f64, std::collections::BTreeMap<String, Vec<f64>>)>
where
    T: Sync,
    F: Fn(&Tape, &crate::autodiff::BoundParams, &T) -> Result<crate::autodiff::Var> + Sync,
{
    let results = crate::parallel::map_collect(items, |_, item| {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = per_sample(&tape, &bound, item)?;
        let val = loss.scalar_value();
        tape.backward(&loss)?;
        Ok::<_, Error>((val, bound.grads()))
    });
    let mut total_loss = 0.0;
    let mut total_grads: Option<std::collections::BTreeMap<String, Vec<f64>>> = None;
    for r in results {
        let (val, grads) = r?;
        total_loss += val;
        match &mut total_grads {
            None => total_grads = Some(grads),
            Some(acc) => {
                for (name, g) in grads {
                    let a = acc.get_mut(&name).expect("same parameter set");
                    for (x, y) in a.iter_mut().zip(&g) {
                        *x += y;
                    }
                }
            }
        }
    }
    Ok((total_loss, total_grads.expect("nonempty batch")))
}

/// Settings of a supervised run.
#[derive(Debug, Clone)]
pub struct SupervisedConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub fps_seed: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            steps: 300,
            batch_size: 16,
            eval_every: 50,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            fps_seed: 0,
        }
    }
}

/// Outcome of a training run: the log plus the best parameters seen.
pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_params: ParamStore,
    /// Eval CD of the best checkpoint, when evaluation ran.
    pub best_eval_cd: Option<f64>,
    pub final_train_loss: f64,
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss {loss} at step {step}")));
    }
    Ok(())
}

/// Minibatch Chamfer training against complete ground truth.
pub fn train_supervised(
    model: &mut XmfNet,
    train: &[SupItem],
    eval: &[EvalItem],
    cfg: &SupervisedConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    cfg.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut log = TrainLog::default();
    let mut best_cd = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut final_loss = f64::NAN;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size).max(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len(); // force a shuffle on first use

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }

        let inv_b = 1.0 / batch.len() as f64;
        let (loss_val, grads) = batched_backward(&model.params, &batch, |tape, bound, item| {
            let img = if model.cfg.unimodal { None } else { Some(&item.image) };
            let out = model.complete_on_tape(tape, bound, &item.partial, img, cfg.fps_seed)?;
            Ok(chamfer_l1(&item.complete, &out)?.scale(inv_b))
        })?;
        check_finite(loss_val, step)?;
        let lr = adam.lr_at_epoch(step / steps_per_epoch);
        adam.step(&mut model.params, &grads, lr)?;
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
            loss_type: "cd",
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
        best_eval_cd: (best_cd.is_finite()).then_some(best_cd),
        final_train_loss: final_loss,
    })
}

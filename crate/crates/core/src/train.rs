//! Training loop, evaluation and the optimizer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lmn_tensor::{no_grad, Rng, Tensor};

use crate::checkpoint;
use crate::data::{Dataset, Split};
use crate::error::{LmnError, Result};
use crate::model::{Mode, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub block_size: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub eval_iters: usize,
    /// Evaluate every this many steps (and always after the last one).
    pub eval_interval: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Cosine decay to a tenth of the base rate instead of a constant rate.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            block_size: 512,
            max_iters: 5000,
            learning_rate: 1e-3,
            eval_iters: 200,
            eval_interval: 500,
            seed: 1337,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            cosine: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("block_size", self.block_size),
            ("max_iters", self.max_iters),
            ("eval_iters", self.eval_iters),
            ("eval_interval", self.eval_interval),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(LmnError::Config(format!("train.{k} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LmnError::Config("learning rate must be positive and betas in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(LmnError::Config("adam_eps must be positive, weight_decay and grad_clip non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("block_size", self.block_size.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("eval_iters", self.eval_iters.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("cosine", self.cosine.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| LmnError::Config(format!("`train.{key}`: cannot parse `{v}`")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "block_size" => self.block_size = num(key, value)?,
            "max_iters" => self.max_iters = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "eval_iters" => self.eval_iters = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "cosine" => self.cosine = num(key, value)?,
            _ => return Err(LmnError::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine {
            return self.learning_rate;
        }
        let min = self.learning_rate / 10.0;
        let frac = step as f64 / self.max_iters as f64;
        min + 0.5 * (self.learning_rate - min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` with matching `grads`. The parameters must
    /// not be referenced by a live graph.
    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(LmnError::Config("optimizer parameter list changed between steps".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let wd = self.weight_decay;
            let eps = self.eps;
            p.update_data(|w| {
                for i in 0..w.len() {
                    let gi = g[i] as f64;
                    let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                    let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let update = (mi / c1) / ((vi / c2).sqrt() + eps);
                    let wi = w[i] as f64;
                    w[i] = (wi - lr * (update + wd * wi)) as f32;
                }
            })?;
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Loss, backward, optional clip and one optimizer step on a single batch.
/// Returns `(loss, grad_norm)` measured before clipping.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    lr: f64,
    clip: f64,
    step: usize,
) -> Result<(f64, f64)> {
    let (loss_value, mut grads) = {
        let logits = model.forward(inputs, batch, Mode::Parallel)?;
        let loss = model.loss(&logits, targets)?;
        loss.backward()?;
        let grads: Vec<Vec<f32>> = model
            .params_mut()
            .into_iter()
            .map(|p| {
                let g = p.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; p.numel()]);
                p.zero_grad();
                g
            })
            .collect();
        (loss.item() as f64, grads)
    };
    let norm = global_norm(&grads);
    if !loss_value.is_finite() || !norm.is_finite() {
        return Err(LmnError::NonFiniteLoss {
            step,
            lr,
            grad_norm: norm,
        });
    }
    if clip > 0.0 && norm > clip {
        let s = (clip / norm) as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    opt.step(model.params_mut(), &grads, lr)?;
    Ok((loss_value, norm))
}

/// Mean loss over `cfg.eval_iters` batches of each split, without
/// touching the parameters.
pub fn evaluate(model: &Model<f32>, ds: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<(f64, f64)> {
    evaluate_in(model, ds, cfg, Mode::Parallel, rng)
}

/// [`evaluate`] with the memory built in `mode`.
pub fn evaluate_in(model: &Model<f32>, ds: &Dataset, cfg: &TrainConfig, mode: Mode, rng: &mut Rng) -> Result<(f64, f64)> {
    no_grad(|| {
        let mut out = [0.0; 2];
        for (slot, split) in out.iter_mut().zip([Split::Train, Split::Val]) {
            let mut total = 0.0;
            for _ in 0..cfg.eval_iters {
                let (x, y) = ds.sample_batch(split, cfg.batch_size, cfg.block_size, rng)?;
                let logits = model.forward(&x, cfg.batch_size, mode)?;
                total += model.loss(&logits, &y)?.item() as f64;
            }
            *slot = total / cfg.eval_iters as f64;
        }
        Ok((out[0], out[1]))
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EvalPoint>,
    /// Training-batch loss of every step.
    pub step_losses: Vec<f64>,
    pub best: EvalPoint,
    pub final_point: EvalPoint,
    pub seconds: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        curve_csv(&self.curve)
    }

    pub fn from_csv(text: &str) -> Result<Vec<EvalPoint>> {
        let mut lines = text.lines();
        if lines.next() != Some("step,train_loss,val_loss") {
            return Err(LmnError::Data("report CSV header must be step,train_loss,val_loss".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || LmnError::Data(format!("bad report row `{l}`"));
                if f.len() != 3 {
                    return Err(bad());
                }
                Ok(EvalPoint {
                    step: f[0].parse().map_err(|_| bad())?,
                    train_loss: f[1].parse().map_err(|_| bad())?,
                    val_loss: f[2].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }
}

pub fn curve_csv(points: &[EvalPoint]) -> String {
    let mut s = String::from("step,train_loss,val_loss\n");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.step, p.train_loss, p.val_loss);
    }
    s
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| LmnError::io(&dir, e))?;
        Ok(Artifacts { dir })
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LmnError::io(path, e))
}

/// Runs `cfg.max_iters` optimizer steps, evaluating every
/// `cfg.eval_interval` steps and after the last one. Evaluation always
/// draws the same batches. With `artifacts`, writes the report CSV, the
/// vocabulary and checkpoints at the end and at the best validation loss.
pub fn train(
    model: &mut Model<f32>,
    ds: &Dataset,
    cfg: &TrainConfig,
    artifacts: Option<&Artifacts>,
    mut on_eval: impl FnMut(&EvalPoint),
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.block_size > model.config.max_seq_len {
        return Err(LmnError::Config(format!(
            "block_size {} exceeds the model's max_seq_len {}",
            cfg.block_size, model.config.max_seq_len
        )));
    }
    if ds.vocab.len() != model.config.vocab_size {
        return Err(LmnError::Config(format!(
            "corpus vocabulary has {} symbols, model expects {}",
            ds.vocab.len(),
            model.config.vocab_size
        )));
    }
    if let Some(a) = artifacts {
        ds.vocab.save(&a.vocab())?;
    }
    let start = std::time::Instant::now();
    let root = Rng::new(cfg.seed);
    let mut batches = root.fork(1);
    let eval_rng = root.fork(2);
    let mut opt = AdamW::new(cfg);
    let mut curve = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.max_iters);
    let mut best: Option<EvalPoint> = None;
    for step in 1..=cfg.max_iters {
        let (x, y) = ds.sample_batch(Split::Train, cfg.batch_size, cfg.block_size, &mut batches)?;
        let lr = cfg.lr_at(step - 1);
        let (loss, _) = train_step(model, &mut opt, &x, &y, cfg.batch_size, lr, cfg.grad_clip, step)?;
        step_losses.push(loss);
        if step % cfg.eval_interval == 0 || step == cfg.max_iters {
            let (train_loss, val_loss) = evaluate(model, ds, cfg, &mut eval_rng.clone())?;
            let point = EvalPoint {
                step,
                train_loss,
                val_loss,
            };
            on_eval(&point);
            curve.push(point);
            if best.is_none_or(|b| val_loss < b.val_loss) {
                best = Some(point);
                if let Some(a) = artifacts {
                    checkpoint::save(model, &a.best_checkpoint())?;
                }
            }
            if let Some(a) = artifacts {
                write(&a.report(), &curve_csv(&curve))?;
            }
        }
    }
    if let Some(a) = artifacts {
        checkpoint::save(model, &a.final_checkpoint())?;
    }
    let final_point = *curve.last().expect("at least one evaluation");
    Ok(TrainReport {
        curve,
        step_losses,
        best: best.expect("at least one evaluation"),
        final_point,
        seconds: start.elapsed().as_secs_f64(),
    })
}


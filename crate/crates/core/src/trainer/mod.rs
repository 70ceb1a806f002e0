//! Optimization loop, run configuration, metrics logging and checkpoints.

pub mod checkpoint;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{batch_mean, example_text_loss, lvr_batch_loss, sft_batch_loss, LvrDistance, LvrPrepared};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_examples, EvalMode, EvalReport};
use crate::model::{hex, Bound, Model, ModelConfig, PreparedExample, VlmContext};
use crate::objectives::{loss_jepa, loss_nextlat, loss_pearl, LossBreakdown, PearlLoss, DEFAULT_LAMBDA};
use crate::synthworld::{mix_seed, read_jsonl, TrajectoryExample, Vocab};
use crate::tensor::{Graph, NodeId};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};

pub const METRICS_HEADER: &str = "step,l_vlm,l_jepa,l_nextlat,l_pearl,eval_acc";
pub const EVAL_LOG_HEADER: &str = "step,eval_acc,eval_loss";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
const SAMPLER_STREAM: u64 = 0xB47C;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pearl,
    Sft,
    Lvr,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pearl" => Ok(Mode::Pearl),
            "sft" => Ok(Mode::Sft),
            "lvr" => Ok(Mode::Lvr),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected pearl, sft or lvr)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub nextlat_enabled: bool,
    pub k_pred: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub train_path: PathBuf,
    pub eval_path: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Evaluate every this many steps (and after the last); 0 disables.
    pub eval_every: usize,
    /// Evaluate on at most this many eval items.
    pub eval_limit: Option<usize>,
    /// Architecture; its `k_pred` is overridden by the top-level field.
    pub model: ModelConfig,
    pub vlm_context: VlmContext,
    pub lvr_distance: LvrDistance,
    /// Latent steps decoded when evaluating the latent baseline.
    pub lvr_infer_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Pearl,
            lambda: DEFAULT_LAMBDA,
            nextlat_enabled: true,
            k_pred: 4,
            lr: 3e-4,
            betas: [0.9, 0.95],
            weight_decay: 0.01,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            train_path: PathBuf::from("data/train.jsonl"),
            eval_path: Some(PathBuf::from("data/eval_easy.jsonl")),
            checkpoint_dir: PathBuf::from("runs/default"),
            eval_every: 200,
            eval_limit: None,
            model: ModelConfig::default(),
            vlm_context: VlmContext::Full,
            lvr_distance: LvrDistance::SmoothL1,
            lvr_infer_steps: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite value >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.mode == Mode::Lvr && self.lvr_infer_steps == 0 {
            return bad("lvr_infer_steps must be at least 1");
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { k_pred: self.k_pred, ..self.model.clone() }
    }

    pub fn eval_mode(&self) -> EvalMode {
        match self.mode {
            Mode::Lvr => EvalMode::Lvr { k: self.lvr_infer_steps },
            _ => EvalMode::Direct,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub const EPS: f64 = 1e-8;

    pub fn new(model: &Model, lr: f64, betas: [f64; 2], weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        AdamW { lr, betas, eps: Self::EPS, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update over parallel parameter and gradient slices.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let [b1, b2] = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (g, m, v) = (&grads[i], &mut self.m[i], &mut self.v[i]);
            if g.len() != p.len() || m.len() != p.len() {
                return Err(Error::Shape { op: "adamw", left: vec![p.len()], right: vec![g.len()] });
            }
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let step = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] -= self.lr * (step + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) -> Result<()> {
        let mut params: Vec<&mut [f64]> = model.params.iter_mut().map(|p| p.data.as_mut_slice()).collect();
        self.update(&mut params, grads)
    }
}

/// Three passes per example; the text term is the one the SFT arm uses.
pub fn pearl_batch_loss(
    g: &mut Graph,
    model: &Model,
    b: &Bound,
    batch: &[&PreparedExample],
    ctx: VlmContext,
    lambda: f64,
    nextlat_enabled: bool,
) -> Result<PearlLoss> {
    let mut text = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut nextlat = Vec::with_capacity(batch.len());
    for ex in batch {
        let enc = model.encode_views(g, b, ex, ctx)?;
        let seq = match ctx {
            VlmContext::Full => &ex.full,
            VlmContext::TrajOnly => &ex.traj,
        };
        text.push(example_text_loss(g, enc.answer_logits, ex.answer_class, enc.vlm_logits, seq)?);
        preds.push(enc.h_hat_r);
        targets.push(enc.h_r);
        if let Some(n) = loss_nextlat(g, model, b, enc.traj_hiddens)? {
            nextlat.push(n);
        }
    }
    let vlm = batch_mean(g, &text)?;
    let h_hat = g.concat_rows(&preds)?;
    let h_r = g.concat_rows(&targets)?;
    let jepa = loss_jepa(g, h_hat, h_r)?;
    let nextlat = if nextlat.is_empty() { None } else { Some(batch_mean(g, &nextlat)?) };
    loss_pearl(g, vlm, jepa, nextlat, lambda, nextlat_enabled)
}

#[derive(Debug, Clone)]
enum TrainSet {
    Views(Vec<PreparedExample>),
    Lvr(Vec<LvrPrepared>),
}

impl TrainSet {
    fn len(&self) -> usize {
        match self {
            TrainSet::Views(v) => v.len(),
            TrainSet::Lvr(v) => v.len(),
        }
    }

    fn id(&self, i: usize) -> &str {
        match self {
            TrainSet::Views(v) => &v[i].id,
            TrainSet::Lvr(v) => &v[i].id,
        }
    }
}

/// Loss values and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub losses: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    pub step: usize,
    pub best: Option<(usize, f64)>,
    rng: ChaCha8Rng,
    train: TrainSet,
    eval: Vec<TrajectoryExample>,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState { seed: hex(&rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
}

fn rng_from_state(s: &RngState) -> Result<ChaCha8Rng> {
    let bad = || Error::Format { offset: 0, reason: "unreadable sampler state".into() };
    if s.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

impl Trainer {
    /// Fresh run over in-memory examples.
    pub fn from_examples(cfg: TrainConfig, train: &[TrajectoryExample], eval: Vec<TrajectoryExample>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(), cfg.seed)?;
        let opt = AdamW::new(&model, cfg.lr, cfg.betas, cfg.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SAMPLER_STREAM, 0));
        Self::assemble(cfg, model, opt, rng, 0, None, train, eval)
    }

    /// Fresh run reading the configured dataset files.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let (train, eval) = load_data(&cfg)?;
        Self::from_examples(cfg, &train, eval)
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let (train, eval) = load_data(&cfg)?;
        Self::resume_with(cfg, ck, &train, eval)
    }

    pub fn resume_with(
        cfg: TrainConfig,
        ck: Checkpoint,
        train: &[TrajectoryExample],
        eval: Vec<TrajectoryExample>,
    ) -> Result<Self> {
        cfg.validate()?;
        if ck.model.cfg != cfg.model_config() {
            return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
        }
        let opt = ck.adam.ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        let rng =
            rng_from_state(ck.rng.as_ref().ok_or_else(|| Error::Config("checkpoint has no sampler state".into()))?)?;
        let best = ck.best;
        Self::assemble(cfg, ck.model, opt, rng, ck.step, best, train, eval)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        model: Model,
        opt: AdamW,
        rng: ChaCha8Rng,
        step: usize,
        best: Option<(usize, f64)>,
        train: &[TrajectoryExample],
        mut eval: Vec<TrajectoryExample>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let vocab = Vocab::standard();
        let train = match cfg.mode {
            Mode::Lvr => TrainSet::Lvr(train.iter().map(|e| LvrPrepared::new(e, &vocab)).collect::<Result<_>>()?),
            _ => TrainSet::Views(train.iter().map(|e| PreparedExample::new(e, &vocab)).collect::<Result<_>>()?),
        };
        if let Some(limit) = cfg.eval_limit {
            eval.truncate(limit);
        }
        Ok(Trainer { cfg, model, opt, step, best, rng, train, eval })
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    /// Draws `batch_size` indices uniformly with replacement.
    pub fn sample_batch(&mut self) -> Vec<usize> {
        let n = self.train.len();
        (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..n)).collect()
    }

    /// Builds the mode's loss over `batch` and backpropagates it.
    pub fn compute(&self, batch: &[usize]) -> Result<StepGrads> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        let (root, losses) = self.batch_loss(&mut g, &b, batch)?;
        let finite = [losses.l_vlm, losses.l_jepa, losses.l_nextlat, losses.l_pearl].iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                step: self.step + 1,
                batch: batch.iter().map(|&i| self.train.id(i).to_string()).collect(),
            });
        }
        g.backward(root)?;
        let grads = b.ids.iter().map(|&id| g.grad(id)).collect();
        Ok(StepGrads { losses, grads })
    }

    fn batch_loss(&self, g: &mut Graph, b: &Bound, batch: &[usize]) -> Result<(NodeId, LossBreakdown)> {
        let cfg = &self.cfg;
        match &self.train {
            TrainSet::Views(set) => {
                let refs: Vec<&PreparedExample> = batch.iter().map(|&i| &set[i]).collect();
                if cfg.mode == Mode::Sft {
                    let l = sft_batch_loss(g, &self.model, b, &refs, cfg.vlm_context)?;
                    let v = g.scalar(l);
                    Ok((l, LossBreakdown { l_vlm: v, l_jepa: 0.0, l_nextlat: 0.0, l_pearl: v }))
                } else {
                    let l =
                        pearl_batch_loss(g, &self.model, b, &refs, cfg.vlm_context, cfg.lambda, cfg.nextlat_enabled)?;
                    Ok((l.total, l.breakdown(g)))
                }
            }
            TrainSet::Lvr(set) => {
                let refs: Vec<&LvrPrepared> = batch.iter().map(|&i| &set[i]).collect();
                let l = lvr_batch_loss(g, &self.model, b, &refs, cfg.lvr_distance)?;
                let losses = LossBreakdown {
                    l_vlm: g.scalar(l.text),
                    l_jepa: g.scalar(l.latent),
                    l_nextlat: 0.0,
                    l_pearl: g.scalar(l.total),
                };
                Ok((l.total, losses))
            }
        }
    }

    /// Samples a batch, backpropagates and applies one optimizer update.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.sample_batch();
        let sg = self.compute(&batch)?;
        self.opt.step(&mut self.model, &sg.grads)?;
        self.step += 1;
        Ok(sg.losses)
    }

    pub fn evaluate(&self) -> Result<Option<EvalReport>> {
        if self.eval.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate_examples(&self.model, &self.eval, self.cfg.eval_mode())?.0))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train_config: Some(self.cfg.clone()),
            step: self.step,
            adam: Some(self.opt.clone()),
            rng: Some(rng_state(&self.rng)),
            best: self.best,
        }
    }

    fn eval_due(&self) -> bool {
        self.cfg.eval_every > 0 && (self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps)
    }

    /// Trains until `cfg.steps`, appending to the metrics logs under
    /// `cfg.checkpoint_dir` and writing `best.ckpt` and `last.ckpt` there.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let dir = self.cfg.checkpoint_dir.clone();
        fs::create_dir_all(&dir)?;
        let fresh = self.step == 0;
        let mut metrics = open_log(&dir.join(METRICS_FILE), METRICS_HEADER, fresh)?;
        let mut eval_log = open_log(&dir.join(EVAL_LOG_FILE), EVAL_LOG_HEADER, fresh)?;
        let mut history = Vec::new();
        let mut last_eval = None;
        while self.step < self.cfg.steps {
            let losses = self.train_step()?;
            history.push(losses);
            let mut acc_field = String::new();
            if self.eval_due() {
                if let Some(rep) = self.evaluate()? {
                    acc_field = rep.accuracy.to_string();
                    writeln!(eval_log, "{},{},{}", self.step, rep.accuracy, rep.answer_nll)?;
                    if self.best.is_none_or(|(_, a)| rep.accuracy > a) {
                        self.best = Some((self.step, rep.accuracy));
                        save_checkpoint(&dir.join(BEST_CKPT), &self.checkpoint())?;
                    }
                    last_eval = Some(rep);
                }
            }
            writeln!(
                metrics,
                "{},{},{},{},{},{}",
                self.step, losses.l_vlm, losses.l_jepa, losses.l_nextlat, losses.l_pearl, acc_field
            )?;
        }
        metrics.flush()?;
        eval_log.flush()?;
        let last = self.checkpoint();
        save_checkpoint(&dir.join(LAST_CKPT), &last)?;
        if self.best.is_none() {
            save_checkpoint(&dir.join(BEST_CKPT), &last)?;
        }
        Ok(TrainSummary {
            steps: self.step,
            history,
            best: self.best,
            last_eval,
            metrics_path: dir.join(METRICS_FILE),
            best_path: dir.join(BEST_CKPT),
            last_path: dir.join(LAST_CKPT),
        })
    }
}

fn open_log(path: &Path, header: &str, fresh: bool) -> Result<BufWriter<File>> {
    let f = if fresh || !path.exists() {
        let mut f = File::create(path)?;
        writeln!(f, "{header}")?;
        f
    } else {
        OpenOptions::new().append(true).open(path)?
    };
    Ok(BufWriter::new(f))
}

fn load_data(cfg: &TrainConfig) -> Result<(Vec<TrajectoryExample>, Vec<TrajectoryExample>)> {
    let train = read_jsonl(&cfg.train_path)?;
    if train.malformed > 0 {
        return Err(Error::Data(format!("{}: {} malformed lines", cfg.train_path.display(), train.malformed)));
    }
    let eval = match &cfg.eval_path {
        Some(p) => read_jsonl(p)?.examples,
        None => Vec::new(),
    };
    Ok((train.examples, eval))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    /// Loss breakdown of every step run in this call.
    pub history: Vec<LossBreakdown>,
    pub best: Option<(usize, f64)>,
    pub last_eval: Option<EvalReport>,
    pub metrics_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

/// Runs a fresh training job from a configuration.
pub fn train(cfg: TrainConfig) -> Result<TrainSummary> {
    Trainer::new(cfg)?.run()
}

/// Windowed moving average; empty when the series is shorter than `window`.
pub fn smoothed(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || series.len() < window {
        return Vec::new();
    }
    series.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use entmax_core::analysis::{AlphaTrajectory, MetricReport, ReportOptions};
use entmax_core::{AttentionKind, AttentionTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::io;

use super::model::{argmax_rows, cross_entropy, ModelShape, ToyModel};
use super::task::{generate_dataset, Example, Task, ToyTaskSpec};

/// Row normalizer used by every head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiMode {
    /// α = 1 everywhere.
    Softmax,
    /// α = 1.5 everywhere.
    Entmax15,
    /// Learnable α per head.
    Adaptive,
}

impl PiMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PiMode::Softmax => "softmax",
            PiMode::Entmax15 => "entmax15",
            PiMode::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for PiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softmax" => Ok(PiMode::Softmax),
            "entmax15" => Ok(PiMode::Entmax15),
            "adaptive" => Ok(PiMode::Adaptive),
            _ => Err(format!("unknown pi_mode `{s}` (softmax, entmax15, adaptive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub pi_mode: PiMode,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub log_every: u64,
    pub seed: u64,
    /// Residual tolerance of the bisection solver.
    pub solver_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 32,
            head_dim: 8,
            pi_mode: PiMode::Adaptive,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 1000,
            batch_size: 8,
            log_every: 50,
            seed: 0,
            solver_tol: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.head_dim == 0 {
            return bad("layers, heads, model_dim and head_dim must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        if !(self.solver_tol > 0.0) {
            return bad("solver_tol must be positive");
        }
        Ok(())
    }
}

/// Task and training settings of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub task: ToyTaskSpec,
    pub train: TrainConfig,
}

const KEYS: &[&str] = &[
    "task",
    "vocab_size",
    "seq_len",
    "n_train",
    "n_eval",
    "data_seed",
    "max_cluster_len",
    "layers",
    "heads",
    "model_dim",
    "head_dim",
    "pi_mode",
    "learning_rate",
    "momentum",
    "steps",
    "batch_size",
    "log_every",
    "seed",
    "solver_tol",
];

impl RunConfig {
    /// Starts from the defaults and applies every key present. Unknown keys
    /// are rejected.
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        let mut run = Self::default();
        run.apply(cfg)?;
        Ok(run)
    }

    pub fn apply(&mut self, cfg: &FlatConfig) -> Result<()> {
        if let Some(k) = cfg.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::UnknownKey(k.to_string()));
        }
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = cfg.parsed($key)? {
                    $field = v;
                }
            };
        }
        let (t, r) = (&mut self.task, &mut self.train);
        set!(t.task, "task");
        set!(t.vocab_size, "vocab_size");
        set!(t.seq_len, "seq_len");
        set!(t.n_train, "n_train");
        set!(t.n_eval, "n_eval");
        set!(t.seed, "data_seed");
        set!(t.max_cluster_len, "max_cluster_len");
        set!(r.layers, "layers");
        set!(r.heads, "heads");
        set!(r.model_dim, "model_dim");
        set!(r.head_dim, "head_dim");
        set!(r.pi_mode, "pi_mode");
        set!(r.learning_rate, "learning_rate");
        set!(r.momentum, "momentum");
        set!(r.steps, "steps");
        set!(r.batch_size, "batch_size");
        set!(r.log_every, "log_every");
        set!(r.seed, "seed");
        set!(r.solver_tol, "solver_tol");
        Ok(())
    }

    /// Every setting, in a fixed order, as written to `config.snapshot`.
    pub fn to_flat(&self) -> FlatConfig {
        let (t, r) = (&self.task, &self.train);
        let values = [
            t.task.to_string(),
            t.vocab_size.to_string(),
            t.seq_len.to_string(),
            t.n_train.to_string(),
            t.n_eval.to_string(),
            t.seed.to_string(),
            t.max_cluster_len.to_string(),
            r.layers.to_string(),
            r.heads.to_string(),
            r.model_dim.to_string(),
            r.head_dim.to_string(),
            r.pi_mode.to_string(),
            r.learning_rate.to_string(),
            r.momentum.to_string(),
            r.steps.to_string(),
            r.batch_size.to_string(),
            r.log_every.to_string(),
            r.seed.to_string(),
            r.solver_tol.to_string(),
        ];
        let mut flat = FlatConfig::new();
        for (k, v) in KEYS.iter().zip(values) {
            flat.set(*k, v);
        }
        flat
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            vocab_size: self.task.vocab_size,
            seq_len: self.task.seq_len,
            layers: self.train.layers,
            heads: self.train.heads,
            model_dim: self.train.model_dim,
            head_dim: self.train.head_dim,
        }
    }
}

/// Reported after every optimizer step.
#[derive(Debug, Clone)]
pub struct Progress {
    pub step: u64,
    /// Mean batch loss before the update.
    pub loss: f64,
    /// `[layer][head]` after the update.
    pub alphas: Vec<Vec<f64>>,
    /// `[layer][head]` change of the raw α applied by this step.
    pub raw_alpha_update: Vec<Vec<f64>>,
    /// `[layer][head]` batch gradient of the raw α.
    pub raw_alpha_grad: Vec<Vec<f64>>,
    pub tokens_per_sec: f64,
}

/// Loss, accuracy and attention on a set of sequences.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    /// One tensor per sequence.
    pub tensors: Vec<AttentionTensor>,
}

pub fn evaluate(model: &ToyModel, examples: &[Example]) -> Result<EvalResult> {
    let (mut loss, mut correct, mut total) = (0.0, 0usize, 0usize);
    let mut tensors = Vec::with_capacity(examples.len());
    for ex in examples {
        let fwd = model.forward(&ex.tokens)?;
        loss += cross_entropy(&fwd.logits, &ex.targets)?.0;
        let predicted = argmax_rows(&fwd.logits);
        correct += predicted.iter().zip(&ex.targets).filter(|(a, b)| a == b).count();
        total += ex.targets.len();
        tensors.push(fwd.attention()?);
    }
    Ok(EvalResult {
        loss: loss / examples.len() as f64,
        accuracy: correct as f64 / total as f64,
        tensors,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub report: MetricReport,
    pub trajectory: AlphaTrajectory,
    pub initial: EvalResult,
    pub last: EvalResult,
    /// Cluster partition of every eval sequence for the cluster-sum task.
    pub clusters: Option<Vec<Vec<Vec<usize>>>>,
    pub tokens_per_sec: f64,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with_progress(cfg, |_| {})
}

/// SGD with momentum on mean token cross-entropy, one learning rate for
/// every parameter. α is logged at step 0, every `log_every` steps and at
/// the last step.
pub fn train_with_progress(
    cfg: &RunConfig,
    mut progress: impl FnMut(&Progress),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.task)?;
    let tc = &cfg.train;
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = ToyModel::init(cfg.model_shape(), tc.pi_mode, tc.solver_tol, &mut init_rng)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    batch_rng.set_stream(1);

    let kind = AttentionKind::EncoderSelf;
    let mut trajectory = AlphaTrajectory::new();
    let log_alphas = |traj: &mut AlphaTrajectory, step: u64, model: &ToyModel| {
        for (l, a) in model.alphas().iter().enumerate() {
            traj.record(step, kind, l, a);
        }
    };
    log_alphas(&mut trajectory, 0, &model);
    let initial = evaluate(&model, &data.eval)?;

    let raw_idx = model.raw_alpha_indices();
    let mut params = model.params_flat();
    let mut velocity = vec![0.0; params.len()];
    let mut grad = vec![0.0; params.len()];
    let start = Instant::now();
    let tokens_per_step = (tc.batch_size * cfg.task.seq_len) as f64;
    for step in 1..=tc.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..tc.batch_size {
            let ex = &data.train[batch_rng.gen_range(0..data.train.len())];
            let (l, g) = model.loss_and_grad(&ex.tokens, &ex.targets)?;
            loss += l;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        let scale = 1.0 / tc.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss { step, loss });
        }
        let before: Vec<Vec<f64>> =
            raw_idx.iter().map(|l| l.iter().map(|&i| params[i]).collect()).collect();
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = tc.momentum * *v + g * scale;
            *p -= tc.learning_rate * *v;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::DivergedLoss { step, loss: f64::NAN });
        }
        model.set_params_flat(&params)?;
        if step % tc.log_every == 0 || step == tc.steps {
            log_alphas(&mut trajectory, step, &model);
        }
        let pick = |src: &[f64], s: f64| -> Vec<Vec<f64>> {
            raw_idx.iter().map(|l| l.iter().map(|&i| src[i] * s).collect()).collect()
        };
        let after = pick(&params, 1.0);
        progress(&Progress {
            step,
            loss,
            alphas: model.alphas(),
            raw_alpha_update: after
                .iter()
                .zip(&before)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
            raw_alpha_grad: pick(&grad, scale),
            tokens_per_sec: step as f64 * tokens_per_step / start.elapsed().as_secs_f64(),
        });
    }
    let elapsed = start.elapsed().as_secs_f64();
    let tokens_per_sec =
        if tc.steps == 0 { 0.0 } else { tc.steps as f64 * tokens_per_step / elapsed };

    let last = evaluate(&model, &data.eval)?;
    let clusters = (cfg.task.task == Task::ClusterSum)
        .then(|| data.eval.iter().map(|ex| ex.clusters.clone()).collect::<Vec<_>>());
    let report =
        MetricReport::from_tensors(&last.tensors, &ReportOptions::default(), clusters.as_deref())?;
    Ok(TrainOutcome { model, report, trajectory, initial, last, clusters, tokens_per_sec })
}

/// Writes `config.snapshot`, `alpha_trajectory.csv`, `report.json`,
/// `model.json`, `tensors/seq_NNNN.json` and, for the cluster-sum task,
/// `clusters.json`.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    io::write_text(&dir.join("config.snapshot"), &cfg.to_flat().render())?;
    io::write_text(&dir.join("alpha_trajectory.csv"), &outcome.trajectory.to_csv())?;
    io::write_json(&dir.join("report.json"), &outcome.report)?;
    io::write_json(&dir.join("model.json"), &outcome.model)?;
    for (i, t) in outcome.last.tensors.iter().enumerate() {
        io::write_json(&tensors.join(format!("seq_{i:04}.json")), t)?;
    }
    if let Some(c) = &outcome.clusters {
        io::write_json(&dir.join("clusters.json"), c)?;
    }
    Ok(())
}

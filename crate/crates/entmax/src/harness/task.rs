//! Synthetic sequence tasks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Token id never produced as input; used as the target where none exists.
pub const RESERVED_TOKEN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// `target[t] = input[t - 1]`.
    PrevToken,
    /// `target[t] = input[t + 1]`.
    NextToken,
    /// Contiguous clusters whose first token is marked; every position
    /// predicts the content of its cluster's marked token.
    ClusterSum,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::PrevToken => "prev-token",
            Task::NextToken => "next-token",
            Task::ClusterSum => "cluster-sum",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "prev-token" => Ok(Task::PrevToken),
            "next-token" => Ok(Task::NextToken),
            "cluster-sum" => Ok(Task::ClusterSum),
            _ => Err(format!("unknown task `{s}` (prev-token, next-token, cluster-sum)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskSpec {
    pub task: Task,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Longest cluster in the cluster-sum task; 1 gives singleton clusters.
    pub max_cluster_len: usize,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            task: Task::PrevToken,
            vocab_size: 32,
            seq_len: 16,
            n_train: 2048,
            n_eval: 32,
            seed: 0,
            max_cluster_len: 3,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.task == Task::ClusterSum && self.vocab_size < 5 {
            return bad("cluster-sum needs vocab_size of at least 5");
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return bad("n_train and n_eval must be positive");
        }
        if self.max_cluster_len == 0 {
            return bad("max_cluster_len must be positive");
        }
        Ok(())
    }

    /// Distinct content values in the cluster-sum encoding.
    fn cluster_values(&self) -> usize {
        (self.vocab_size - 1) / 2
    }
}

/// One sequence with per-position targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// Contiguous partition of the positions; singletons outside the
    /// cluster-sum task.
    pub clusters: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Draws the train and eval sets from a ChaCha stream seeded by `spec.seed`.
pub fn generate_dataset(spec: &ToyTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.n_train).map(|_| draw(spec, &mut rng)).collect();
    let eval = (0..spec.n_eval).map(|_| draw(spec, &mut rng)).collect();
    Ok(Dataset { train, eval })
}

fn draw(spec: &ToyTaskSpec, rng: &mut ChaCha8Rng) -> Example {
    let n = spec.seq_len;
    match spec.task {
        Task::PrevToken | Task::NextToken => {
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(1..spec.vocab_size)).collect();
            let targets = shifted_targets(&tokens, spec.task);
            Example { tokens, targets, clusters: (0..n).map(|i| vec![i]).collect() }
        }
        Task::ClusterSum => {
            let c = spec.cluster_values();
            let mut clusters = Vec::new();
            let mut start = 0;
            while start < n {
                let len = rng.gen_range(1..=spec.max_cluster_len).min(n - start);
                clusters.push((start..start + len).collect::<Vec<_>>());
                start += len;
            }
            let values: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let mut tokens = vec![0; n];
            let mut targets = vec![0; n];
            for cluster in &clusters {
                for (j, &i) in cluster.iter().enumerate() {
                    tokens[i] = encode_cluster_token(values[i], j == 0, c);
                    targets[i] = 1 + values[cluster[0]];
                }
            }
            Example { tokens, targets, clusters }
        }
    }
}

/// Content value `v` in `[0, c)`; the upper half of the vocabulary marks the
/// first token of a cluster.
fn encode_cluster_token(v: usize, starts_cluster: bool, c: usize) -> usize {
    1 + v + if starts_cluster { c } else { 0 }
}

/// Targets for the positional tasks, padded with [`RESERVED_TOKEN`].
pub fn shifted_targets(tokens: &[usize], task: Task) -> Vec<usize> {
    let n = tokens.len();
    match task {
        Task::PrevToken => {
            core::iter::once(RESERVED_TOKEN).chain(tokens[..n - 1].iter().copied()).collect()
        }
        Task::NextToken => {
            tokens[1..].iter().copied().chain(core::iter::once(RESERVED_TOKEN)).collect()
        }
        Task::ClusterSum => panic!("cluster-sum targets depend on the cluster layout"),
    }
}

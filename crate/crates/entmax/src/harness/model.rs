//! Token and position embeddings, residual multi-head attention layers and
//! a linear readout trained with token-level cross-entropy.

use entmax_core::attention::{
    multi_head_backward, multi_head_forward, HeadProjection, MultiHeadBlock, MultiHeadForward,
};
use entmax_core::{AttentionKind, AttentionTensor, Matrix, ShapeParam};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::PiMode;

/// Dimensions of a [`ToyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    tok_emb: Matrix,
    pos_emb: Matrix,
    blocks: Vec<MultiHeadBlock>,
    w_read: Matrix,
    b_read: Vec<f64>,
}

/// Intermediate values of one sequence, kept for the backward pass.
pub struct SequenceForward {
    pub logits: Matrix,
    hidden: Vec<Matrix>,
    blocks: Vec<MultiHeadForward>,
}

impl SequenceForward {
    /// Attention of every layer stacked into one tensor.
    pub fn attention(&self) -> Result<AttentionTensor> {
        Ok(AttentionTensor::stack(self.blocks.iter().map(|b| b.attention.clone()).collect())?)
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

impl ToyModel {
    /// Projections are drawn uniformly in `±1/√fan_in`, embeddings in `±1`,
    /// learnable raw α uniformly in `[-1, 1]`.
    pub fn init(
        shape: ModelShape,
        pi_mode: PiMode,
        solver_tol: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ModelShape { vocab_size, seq_len, layers, heads, model_dim, head_dim } = shape;
        if layers == 0 || heads == 0 || model_dim == 0 || head_dim == 0 {
            return Err(Error::InvalidInput("model dimensions must be positive".into()));
        }
        let tok_emb = uniform(rng, vocab_size, model_dim, 1.0);
        let pos_emb = uniform(rng, seq_len, model_dim, 1.0);
        let proj_bound = 1.0 / (model_dim as f64).sqrt();
        let out_bound = 1.0 / ((heads * head_dim) as f64).sqrt();
        let mut blocks = Vec::with_capacity(layers);
        for _ in 0..layers {
            let projections = (0..heads)
                .map(|_| {
                    HeadProjection::new(
                        uniform(rng, model_dim, head_dim, proj_bound),
                        uniform(rng, model_dim, head_dim, proj_bound),
                        uniform(rng, model_dim, head_dim, proj_bound),
                    )
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let w_out = uniform(rng, heads * head_dim, model_dim, out_bound);
            let shapes = (0..heads)
                .map(|_| match pi_mode {
                    PiMode::Softmax => Ok(ShapeParam::softmax()),
                    PiMode::Entmax15 => ShapeParam::fixed(1.5),
                    PiMode::Adaptive => ShapeParam::learnable(rng.gen_range(-1.0..=1.0)),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let block =
                MultiHeadBlock::new(projections, shapes, w_out, AttentionKind::EncoderSelf)?
                    .with_tol(solver_tol)?;
            blocks.push(block);
        }
        let w_read = uniform(rng, model_dim, vocab_size, 1.0 / (model_dim as f64).sqrt());
        Ok(Self { tok_emb, pos_emb, blocks, w_read, b_read: vec![0.0; vocab_size] })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab_size: self.tok_emb.rows(),
            seq_len: self.pos_emb.rows(),
            layers: self.blocks.len(),
            heads: self.blocks[0].num_heads(),
            model_dim: self.tok_emb.cols(),
            head_dim: self.blocks[0].head_dim(),
        }
    }

    pub fn blocks(&self) -> &[MultiHeadBlock] {
        &self.blocks
    }

    /// `[layer][head]`.
    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(MultiHeadBlock::alphas).collect()
    }

    /// `[layer][head]`.
    pub fn raw_alphas(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.shapes().iter().map(ShapeParam::raw).collect()).collect()
    }

    /// Positions of the raw α parameters in [`Self::params_flat`],
    /// `[layer][head]`.
    pub fn raw_alpha_indices(&self) -> Vec<Vec<usize>> {
        let mut offset = self.tok_emb.as_slice().len() + self.pos_emb.as_slice().len();
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let end = offset + b.num_params();
            out.push((end - b.num_heads()..end).collect());
            offset = end;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tok_emb.as_slice().len()
            + self.pos_emb.as_slice().len()
            + self.blocks.iter().map(MultiHeadBlock::num_params).sum::<usize>()
            + self.w_read.as_slice().len()
            + self.b_read.len()
    }

    /// Embeddings, then every block in [`MultiHeadBlock::params_flat`]
    /// order, then the readout weights and bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.tok_emb.as_slice());
        out.extend_from_slice(self.pos_emb.as_slice());
        for b in &self.blocks {
            out.extend(b.params_flat());
        }
        out.extend_from_slice(self.w_read.as_slice());
        out.extend_from_slice(&self.b_read);
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, found {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut rest = params;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let n = self.tok_emb.as_slice().len();
        self.tok_emb.as_mut_slice().copy_from_slice(take(n));
        let n = self.pos_emb.as_slice().len();
        self.pos_emb.as_mut_slice().copy_from_slice(take(n));
        for b in &mut self.blocks {
            let n = b.num_params();
            b.set_params_flat(take(n))?;
        }
        let n = self.w_read.as_slice().len();
        self.w_read.as_mut_slice().copy_from_slice(take(n));
        let n = self.b_read.len();
        self.b_read.copy_from_slice(take(n));
        Ok(())
    }

    fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let shape = self.shape();
        if tokens.is_empty() || tokens.len() > shape.seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                shape.seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= shape.vocab_size) {
            return Err(Error::InvalidInput(format!("token {t} outside the vocabulary")));
        }
        Ok(Matrix::from_fn(tokens.len(), shape.model_dim, |i, j| {
            self.tok_emb[(tokens[i], j)] + self.pos_emb[(i, j)]
        }))
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<SequenceForward> {
        let mut x = self.embed(tokens)?;
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let fwd = multi_head_forward(block, &x, &x, &x, None)?;
            hidden.push(x.clone());
            x.add_assign(&fwd.output);
            blocks.push(fwd);
        }
        let mut logits = x.matmul(&self.w_read);
        for i in 0..logits.rows() {
            for (l, b) in logits.row_mut(i).iter_mut().zip(&self.b_read) {
                *l += b;
            }
        }
        hidden.push(x);
        Ok(SequenceForward { logits, hidden, blocks })
    }

    /// Mean cross-entropy over positions and its gradient in
    /// [`Self::params_flat`] layout.
    pub fn loss_and_grad(&self, tokens: &[usize], targets: &[usize]) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward(tokens)?;
        let (loss, d_logits) = cross_entropy(&fwd.logits, targets)?;
        let shape = self.shape();

        let top = fwd.hidden.last().expect("final hidden state");
        let d_w_read = top.t_matmul(&d_logits);
        let mut d_b_read = vec![0.0; shape.vocab_size];
        for i in 0..d_logits.rows() {
            for (acc, g) in d_b_read.iter_mut().zip(d_logits.row(i)) {
                *acc += g;
            }
        }
        let mut d_x = d_logits.matmul_t(&self.w_read);
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bf) in self.blocks.iter().zip(&fwd.blocks).rev() {
            let g = multi_head_backward(block, bf, &d_x)?;
            d_x.add_assign(&g.q);
            d_x.add_assign(&g.k);
            d_x.add_assign(&g.v);
            block_grads.push(g.params_flat());
        }
        block_grads.reverse();

        let mut d_tok = Matrix::zeros(shape.vocab_size, shape.model_dim);
        let mut d_pos = Matrix::zeros(shape.seq_len, shape.model_dim);
        for (i, &t) in tokens.iter().enumerate() {
            for (j, &g) in d_x.row(i).iter().enumerate() {
                d_tok.row_mut(t)[j] += g;
                d_pos.row_mut(i)[j] += g;
            }
        }
        let mut grad = Vec::with_capacity(self.num_params());
        grad.extend_from_slice(d_tok.as_slice());
        grad.extend_from_slice(d_pos.as_slice());
        for g in block_grads {
            grad.extend(g);
        }
        grad.extend_from_slice(d_w_read.as_slice());
        grad.extend(d_b_read);
        Ok((loss, grad))
    }
}

/// Mean token cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::InvalidInput("one target per position".into()));
    }
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        if t >= row.len() {
            return Err(Error::InvalidInput(format!("target {t} outside the vocabulary")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[t];
        for (g, &l) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (l - log_z).exp() / n;
        }
        grad.row_mut(i)[t] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Index of the largest logit per position.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

//! Skip-gram with negative sampling, single-threaded and deterministic.
//!
//! Deliberately sequential: the contract is that a (corpus, params, seed)
//! triple always yields the same table, so update order is part of the
//! algorithm. Hogwild-style parallel updates would break that for speed we
//! do not need at this scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{EmbeddingTable, FeaturizeError, TokenCorpus};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipgramParams {
    pub dim: usize,
    pub epochs: u64,
    pub alpha: Real,
    pub window: usize,
    pub negative: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SkipgramOutput {
    pub table: EmbeddingTable,
    /// Mean pair loss per epoch, for convergence checks.
    pub epoch_losses: Vec<Real>,
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ln(1 + e^x) without overflow; -ln sigmoid(x) = softplus(-x).
fn softplus(x: Real) -> Real {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss and gradients for one (center, context, negatives) sample:
/// `L = -ln σ(u_pos·v) - Σ_n ln σ(-u_n·v)`.
/// Returns `(loss, dL/dv, dL/du_pos, dL/du_negs)`. Pure; the trainer applies
/// the same formulas in place, and the tests difference this function.
pub fn pair_loss_and_grads(
    v: &[Real],
    u_pos: &[Real],
    u_negs: &[&[Real]],
) -> (Real, Vec<Real>, Vec<Real>, Vec<Vec<Real>>) {
    let pos_dot = dot(u_pos, v);
    let mut loss = softplus(-pos_dot);
    let g_pos = sigmoid(pos_dot) - 1.0;
    let mut dv: Vec<Real> = u_pos.iter().map(|u| g_pos * u).collect();
    let du_pos: Vec<Real> = v.iter().map(|x| g_pos * x).collect();

    let mut du_negs = Vec::with_capacity(u_negs.len());
    for u_n in u_negs {
        let neg_dot = dot(u_n, v);
        loss += softplus(neg_dot);
        let g_neg = sigmoid(neg_dot);
        for (d, u) in dv.iter_mut().zip(*u_n) {
            *d += g_neg * u;
        }
        du_negs.push(v.iter().map(|x| g_neg * x).collect());
    }
    (loss, dv, du_pos, du_negs)
}

struct NegativeSampler {
    // Cumulative unigram^0.75 mass in vocab-index order.
    cumulative: Vec<Real>,
    total: Real,
}

impl NegativeSampler {
    fn new(counts: &[u64]) -> NegativeSampler {
        let mut cumulative = Vec::with_capacity(counts.len());
        let mut acc = 0.0;
        for &c in counts {
            acc += (c as Real).powf(0.75);
            cumulative.push(acc);
        }
        NegativeSampler { cumulative, total: acc }
    }

    /// Draw one vocab index != `exclude`, or `None` after bounded retries
    /// (only reachable in degenerate single-token vocabularies).
    fn draw(&self, rng: &mut ChaCha12Rng, exclude: usize) -> Option<usize> {
        for _ in 0..8 {
            let r = rng.gen_range(0.0..self.total);
            let idx = self.cumulative.partition_point(|&c| c <= r);
            if idx != exclude {
                return Some(idx.min(self.cumulative.len() - 1));
            }
        }
        None
    }
}

pub fn train_skipgram(
    corpus: &TokenCorpus,
    p: &SkipgramParams,
) -> Result<SkipgramOutput, FeaturizeError> {
    if p.epochs < 1 {
        return Err(FeaturizeError::BadParam { what: format!("epochs must be >= 1, got {}", p.epochs) });
    }
    if !(p.alpha > 0.0 && p.alpha < 1.0) {
        return Err(FeaturizeError::BadParam { what: format!("alpha must be in (0, 1), got {}", p.alpha) });
    }
    if p.window < 1 {
        return Err(FeaturizeError::BadParam { what: "window must be >= 1".into() });
    }
    if p.negative < 1 {
        return Err(FeaturizeError::BadParam { what: "negative must be >= 1".into() });
    }
    if p.dim < 1 {
        return Err(FeaturizeError::BadParam { what: "dim must be >= 1".into() });
    }
    let vocab_n = corpus.vocab.len();
    if vocab_n == 0 {
        return Err(FeaturizeError::EmptyVocab { min_count: 0 });
    }

    // Vocab-index view of the corpus; out-of-vocab tokens drop out before
    // windowing, as in the reference word2vec implementation.
    let mut tokens_by_index: Vec<&str> = vec![""; vocab_n];
    let mut counts: Vec<u64> = vec![0; vocab_n];
    for (tok, &(idx, count)) in &corpus.vocab {
        tokens_by_index[idx] = tok;
        counts[idx] = count;
    }
    let sentences: Vec<Vec<usize>> = corpus
        .sentences
        .iter()
        .map(|s| s.iter().filter_map(|t| corpus.vocab.get(t).map(|&(i, _)| i)).collect())
        .collect();

    let pairs_per_epoch: u64 = sentences
        .iter()
        .map(|s| {
            let n = s.len();
            (0..n)
                .map(|i| {
                    let lo = i.saturating_sub(p.window);
                    let hi = (i + p.window).min(n.saturating_sub(1));
                    (hi - lo) as u64
                })
                .sum::<u64>()
        })
        .sum();
    let total_pairs = pairs_per_epoch * p.epochs;

    let mut rng = ChaCha12Rng::seed_from_u64(p.seed);
    let bound = 0.5 / p.dim as Real;
    let mut input: Vec<Real> = (0..vocab_n * p.dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut output: Vec<Real> = vec![0.0; vocab_n * p.dim];

    let sampler = NegativeSampler::new(&counts);
    let mut epoch_losses = Vec::with_capacity(p.epochs as usize);
    let mut dv = vec![0.0; p.dim];
    let mut seen_pairs: u64 = 0;

    for _ in 0..p.epochs {
        let mut epoch_loss = 0.0;
        for s in &sentences {
            let n = s.len();
            for i in 0..n {
                let center = s[i];
                let lo = i.saturating_sub(p.window);
                let hi = (i + p.window).min(n.saturating_sub(1));
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let context = s[j];
                    // Linear decay from alpha to alpha/100 over all pairs.
                    let progress = seen_pairs as Real / total_pairs as Real;
                    let lr = p.alpha * (1.0 - 0.99 * progress);
                    seen_pairs += 1;

                    let v_off = center * p.dim;
                    let u_off = context * p.dim;
                    // Positive update (same math as pair_loss_and_grads).
                    let pos_dot = dot(&output[u_off..u_off + p.dim], &input[v_off..v_off + p.dim]);
                    let mut loss = softplus(-pos_dot);
                    let g_pos = sigmoid(pos_dot) - 1.0;
                    for d in 0..p.dim {
                        dv[d] = g_pos * output[u_off + d];
                    }
                    for d in 0..p.dim {
                        output[u_off + d] -= lr * g_pos * input[v_off + d];
                    }
                    // Negatives.
                    for _ in 0..p.negative {
                        let Some(neg) = sampler.draw(&mut rng, context) else { continue };
                        let n_off = neg * p.dim;
                        let neg_dot =
                            dot(&output[n_off..n_off + p.dim], &input[v_off..v_off + p.dim]);
                        loss += softplus(neg_dot);
                        let g_neg = sigmoid(neg_dot);
                        for d in 0..p.dim {
                            dv[d] += g_neg * output[n_off + d];
                        }
                        for d in 0..p.dim {
                            output[n_off + d] -= lr * g_neg * input[v_off + d];
                        }
                    }
                    for d in 0..p.dim {
                        input[v_off + d] -= lr * dv[d];
                    }
                    epoch_loss += loss;
                }
            }
        }
        epoch_losses.push(if pairs_per_epoch > 0 { epoch_loss / pairs_per_epoch as Real } else { 0.0 });
    }

    let table = EmbeddingTable {
        dim: p.dim,
        seed: p.seed,
        vocab: tokens_by_index.iter().map(|t| t.to_string()).collect(),
        vectors: input,
    };
    Ok(SkipgramOutput { table, epoch_losses })
}

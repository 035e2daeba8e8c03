//! Transducer (RNN-T) loss: log-domain forward/backward dynamic
//! programming over the T' x (U+1) alignment lattice, with the exact
//! gradient w.r.t. the per-cell log-probabilities.

use thiserror::Error;

use crate::nn::Mat;

#[derive(Error, Debug)]
pub enum TransducerError {
    #[error("log-probabilities not normalized at cell (t={t}, u={u}): logsumexp = {lse}")]
    Unnormalized { t: usize, u: usize, lse: f64 },
    #[error("target token {0} out of range (vocabulary {1}, blank {2})")]
    TargetOutOfRange(usize, usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
}

/// Per-cell log-probabilities over V+1 symbols for a T' x (U+1) lattice,
/// flattened row-major as [(t * (U+1) + u) * (V+1) + k].
#[derive(Debug, Clone)]
pub struct RnntLogProbs {
    pub t_len: usize,
    /// U + 1 prediction states.
    pub u_len: usize,
    /// V + 1 symbols including blank.
    pub num_symbols: usize,
    pub data: Vec<f64>,
}

impl RnntLogProbs {
    pub fn new(t_len: usize, u_len: usize, num_symbols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), t_len * u_len * num_symbols);
        RnntLogProbs {
            t_len,
            u_len,
            num_symbols,
            data,
        }
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: usize) -> f64 {
        self.data[(t * self.u_len + u) * self.num_symbols + k]
    }

    /// From a tape-shaped matrix with (T' * (U+1)) rows of V+1 entries.
    pub fn from_mat(m: &Mat, t_len: usize, u_len: usize) -> Self {
        assert_eq!(m.rows, t_len * u_len);
        RnntLogProbs {
            t_len,
            u_len,
            num_symbols: m.cols,
            data: m.data.clone(),
        }
    }
}

#[inline]
fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward/backward log-probabilities over the alignment lattice.
#[derive(Debug, Clone)]
pub struct TransducerTrellis {
    pub t_len: usize,
    pub u_len: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    pub log_prob: f64,
}

impl TransducerTrellis {
    #[inline]
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.u_len + u]
    }

    #[inline]
    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * self.u_len + u]
    }

    /// Total log-probability recomputed from the backward pass, for the
    /// consistency invariant.
    pub fn log_prob_from_beta(&self) -> f64 {
        self.beta(0, 0)
    }
}

fn validate(
    log_probs: &RnntLogProbs,
    target: &[usize],
    blank: usize,
) -> Result<(), TransducerError> {
    if log_probs.u_len != target.len() + 1 {
        return Err(TransducerError::ShapeMismatch(format!(
            "lattice has {} prediction states, target has {} tokens",
            log_probs.u_len,
            target.len()
        )));
    }
    if blank >= log_probs.num_symbols {
        return Err(TransducerError::TargetOutOfRange(
            blank,
            log_probs.num_symbols,
            blank,
        ));
    }
    for &k in target {
        if k >= log_probs.num_symbols || k == blank {
            return Err(TransducerError::TargetOutOfRange(
                k,
                log_probs.num_symbols,
                blank,
            ));
        }
    }
    for t in 0..log_probs.t_len {
        for u in 0..log_probs.u_len {
            let row = &log_probs.data[(t * log_probs.u_len + u) * log_probs.num_symbols
                ..(t * log_probs.u_len + u + 1) * log_probs.num_symbols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            if lse.abs() > 1e-5 {
                return Err(TransducerError::Unnormalized { t, u, lse });
            }
        }
    }
    Ok(())
}

/// Builds the forward (alpha) and backward (beta) lattices. The two total
/// log-probabilities agree to machine precision on well-formed inputs.
pub fn rnnt_trellis(
    log_probs: &RnntLogProbs,
    target: &[usize],
    blank: usize,
) -> Result<TransducerTrellis, TransducerError> {
    validate(log_probs, target, blank)?;
    let (t_len, u_len) = (log_probs.t_len, log_probs.u_len);
    let u_max = target.len();
    let blank_at = |t: usize, u: usize| log_probs.at(t, u, blank);
    let emit_at = |t: usize, u: usize| log_probs.at(t, u, target[u]);

    let mut alpha = vec![f64::NEG_INFINITY; t_len * u_len];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_max {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[(t - 1) * u_len + u] + blank_at(t - 1, u)
            } else {
                f64::NEG_INFINITY
            };
            let from_emit = if u > 0 {
                alpha[t * u_len + (u - 1)] + emit_at(t, u - 1)
            } else {
                f64::NEG_INFINITY
            };
            alpha[t * u_len + u] = logsumexp2(from_blank, from_emit);
        }
    }
    let log_prob = alpha[(t_len - 1) * u_len + u_max] + blank_at(t_len - 1, u_max);

    let mut beta = vec![f64::NEG_INFINITY; t_len * u_len];
    beta[(t_len - 1) * u_len + u_max] = blank_at(t_len - 1, u_max);
    for t in (0..t_len).rev() {
        for u in (0..=u_max).rev() {
            if t == t_len - 1 && u == u_max {
                continue;
            }
            let via_blank = if t + 1 < t_len {
                blank_at(t, u) + beta[(t + 1) * u_len + u]
            } else {
                f64::NEG_INFINITY
            };
            let via_emit = if u < u_max {
                emit_at(t, u) + beta[t * u_len + (u + 1)]
            } else {
                f64::NEG_INFINITY
            };
            beta[t * u_len + u] = logsumexp2(via_blank, via_emit);
        }
    }
    debug_assert!(
        (beta[0] - log_prob).abs() < 1e-6 || !log_prob.is_finite(),
        "alpha/beta totals diverge: {} vs {log_prob}",
        beta[0]
    );
    Ok(TransducerTrellis {
        t_len,
        u_len,
        alpha,
        beta,
        log_prob,
    })
}

/// Negative log-likelihood of the target over all monotonic alignments.
pub fn rnnt_loss(
    log_probs: &RnntLogProbs,
    target: &[usize],
    blank: usize,
) -> Result<f64, TransducerError> {
    Ok(-rnnt_trellis(log_probs, target, blank)?.log_prob)
}

/// Gradient of `rnnt_loss` w.r.t. every log-probability entry, via the
/// alpha/beta occupancy of each lattice edge. Cells unreachable by any
/// alignment get exactly zero.
pub fn rnnt_grad(
    log_probs: &RnntLogProbs,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>), TransducerError> {
    let trellis = rnnt_trellis(log_probs, target, blank)?;
    let (t_len, u_len) = (trellis.t_len, trellis.u_len);
    let u_max = target.len();
    let total = trellis.log_prob;
    let mut grad = vec![0.0f64; log_probs.data.len()];
    for t in 0..t_len {
        for u in 0..=u_max {
            let a = trellis.alpha(t, u);
            if a == f64::NEG_INFINITY {
                continue;
            }
            // Blank edge: (t, u) -> (t+1, u); at the terminal cell it ends
            // the alignment.
            let beta_after_blank = if t + 1 < t_len {
                trellis.beta(t + 1, u)
            } else if u == u_max {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            if beta_after_blank > f64::NEG_INFINITY {
                let occ = (a + log_probs.at(t, u, blank) + beta_after_blank - total).exp();
                grad[(t * u_len + u) * log_probs.num_symbols + blank] -= occ;
            }
            // Emit edge: (t, u) -> (t, u+1).
            if u < u_max {
                let beta_after = trellis.beta(t, u + 1);
                if beta_after > f64::NEG_INFINITY {
                    let occ = (a + log_probs.at(t, u, target[u]) + beta_after - total).exp();
                    grad[(t * u_len + u) * log_probs.num_symbols + target[u]] -= occ;
                }
            }
        }
    }
    Ok((-total, grad))
}

/// Tape op wrapping the transducer loss, so training chains through
/// log-softmax automatically.
pub struct RnntTapeOp {
    pub t_len: usize,
    pub u_len: usize,
    pub target: Vec<usize>,
    pub blank: usize,
}

impl crate::nn::tape::CustomGrad for RnntTapeOp {
    fn backward(&self, out_grad: &Mat, inputs: &[&Mat], _out_value: &Mat) -> Vec<Mat> {
        let lp = RnntLogProbs::from_mat(inputs[0], self.t_len, self.u_len);
        let (_, grad) = rnnt_grad(&lp, &self.target, self.blank)
            .expect("rnnt backward on inputs that passed the forward validation");
        let scale = out_grad.data[0];
        vec![Mat::from_vec(
            inputs[0].rows,
            inputs[0].cols,
            grad.iter().map(|g| g * scale).collect(),
        )]
    }
}

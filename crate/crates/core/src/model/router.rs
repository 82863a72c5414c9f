//! Top-k expert routing and batch routing statistics.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

use super::softmax_rows_f64;

/// Per-token expert selection plus batch statistics.
///
/// `weights` are the softmax scores of the selected experts, taken straight
/// from `probs` without renormalization. `f` is each expert's selection
/// frequency over the batch (sums to k); `p_mean` is its mean routing
/// probability (sums to 1).
#[derive(Debug, Clone)]
pub struct RouterDecision {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    pub p_mean: Vec<f64>,
}

impl RouterDecision {
    pub fn n_tokens(&self) -> usize {
        self.indices.len()
    }

    pub fn n_experts(&self) -> usize {
        self.p_mean.len()
    }
}

/// Indices of the k largest entries, descending; ties break to the lower
/// index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Build a routing decision from full per-token softmax rows.
pub fn route_from_probs(probs: &[Vec<f64>], k: usize) -> Result<RouterDecision> {
    if probs.is_empty() {
        return Err(Error::invalid("routing over an empty batch"));
    }
    let n = probs[0].len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-k {k} outside [1, {n}]")));
    }
    let n_tokens = probs.len();
    let mut indices = Vec::with_capacity(n_tokens);
    let mut weights = Vec::with_capacity(n_tokens);
    let mut counts = vec![0usize; n];
    let mut p_sum = vec![0.0f64; n];
    for row in probs {
        if row.len() != n {
            return Err(Error::shape("ragged routing probabilities"));
        }
        for (i, &p) in row.iter().enumerate() {
            p_sum[i] += p;
        }
        let sel = top_k_indices(row, k);
        weights.push(sel.iter().map(|&i| row[i]).collect());
        for &i in &sel {
            counts[i] += 1;
        }
        indices.push(sel);
    }
    let f = counts
        .iter()
        .map(|&c| c as f64 / n_tokens as f64)
        .collect();
    let p_mean = p_sum.iter().map(|&s| s / n_tokens as f64).collect();
    Ok(RouterDecision {
        indices,
        weights,
        probs: probs.to_vec(),
        f,
        p_mean,
    })
}

/// Value-level routing: hidden states times router weights, softmax, top-k.
pub fn route<E: Elem>(h: &Tensor<E>, router_weights: &Tensor<E>, k: usize) -> Result<RouterDecision> {
    let (tokens, d) = (h.rows(), h.cols());
    if router_weights.rows() != d {
        return Err(Error::shape(format!(
            "router weights expect {} input dims, got {}",
            router_weights.rows(),
            d
        )));
    }
    let n = router_weights.cols();
    let mut logits = vec![0.0f64; tokens * n];
    for i in 0..tokens {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..d {
                acc += h.at(i, kk).to_f64() * router_weights.at(kk, j).to_f64();
            }
            logits[i * n + j] = acc;
        }
    }
    let logits_t = Tensor::<f64>::new(vec![tokens, n], logits)?;
    let probs = softmax_rows_f64(&logits_t);
    route_from_probs(&probs, k)
}

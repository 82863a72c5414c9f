//! Discrete diffusion kernels: forward corruption and reverse transition.
//!
//! Both kernels are pure sampling procedures over token sequences. Each
//! position uses its own RNG stream keyed by (seed, step, position, lane),
//! so outcomes are independent of iteration order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// Clean token sequence over a vocabulary of size K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Partially masked sequence at noise level `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySeq {
    pub ids: Vec<u32>,
    pub t: f64,
}

impl NoisySeq {
    pub fn mask_count(&self, mask_id: u32) -> usize {
        self.ids.iter().filter(|&&id| id == mask_id).count()
    }
}

/// How a token is drawn at a position being unmasked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenPolicy {
    /// Argmax of the predicted distribution; ties break to the lower id.
    Greedy,
    /// Categorical draw at the given temperature.
    Sample { temperature: f64 },
}

const LANE_COIN: u64 = 0;
const LANE_TOKEN: u64 = 1;

/// Independently replace each position by MASK with probability `t`.
pub fn forward_mask(y: &TokenSeq, t: f64, key: StreamKey, mask_id: u32) -> Result<NoisySeq> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("noise level t={t} outside [0,1]")));
    }
    if y.ids.contains(&mask_id) {
        return Err(Error::invalid("clean sequence contains MASK"));
    }
    let ids = y
        .ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            let u: f64 = key.rng_at(pos as u64, LANE_COIN).gen();
            if u < t {
                mask_id
            } else {
                id
            }
        })
        .collect();
    Ok(NoisySeq { ids, t })
}

/// Uniform noise level on [0, 1].
pub fn sample_noise_level<R: Rng>(rng: &mut R) -> f64 {
    rng.gen()
}

/// One reverse transition from noise level `t` to `s < t`.
///
/// Unmasked positions are copied verbatim. Each masked position stays MASK
/// with probability s/t, otherwise it receives a token drawn from its
/// predicted distribution according to `policy`.
pub fn reverse_step(
    y_t: &NoisySeq,
    s: f64,
    dists: &[Vec<f64>],
    key: StreamKey,
    policy: TokenPolicy,
    mask_id: u32,
) -> Result<NoisySeq> {
    let t = y_t.t;
    if !(0.0..1.0 + 1e-12).contains(&s) || s >= t {
        return Err(Error::invalid(format!(
            "reverse_step requires 0 <= s < t, got s={s}, t={t}"
        )));
    }
    if dists.len() != y_t.ids.len() {
        return Err(Error::invalid(format!(
            "{} distributions for {} positions",
            dists.len(),
            y_t.ids.len()
        )));
    }
    let stay = s / t;
    let mut ids = Vec::with_capacity(y_t.ids.len());
    for (pos, &id) in y_t.ids.iter().enumerate() {
        if id != mask_id {
            ids.push(id);
            continue;
        }
        let dist = &dists[pos];
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "distribution at position {pos} sums to {total}"
            )));
        }
        let u: f64 = key.rng_at(pos as u64, LANE_COIN).gen();
        if u < stay {
            ids.push(mask_id);
        } else {
            let mut rng = key.rng_at(pos as u64, LANE_TOKEN);
            ids.push(draw_token(dist, policy, &mut rng));
        }
    }
    Ok(NoisySeq { ids, t: s })
}

/// Draw a token id from a distribution per the policy.
pub fn draw_token<R: Rng>(dist: &[f64], policy: TokenPolicy, rng: &mut R) -> u32 {
    match policy {
        TokenPolicy::Greedy => argmax(dist) as u32,
        TokenPolicy::Sample { temperature } => {
            if temperature <= 0.0 {
                return argmax(dist) as u32;
            }
            if (temperature - 1.0).abs() < 1e-12 {
                categorical(dist, rng)
            } else {
                let powered: Vec<f64> = dist.iter().map(|&p| p.powf(1.0 / temperature)).collect();
                let z: f64 = powered.iter().sum();
                let scaled: Vec<f64> = powered.iter().map(|&p| p / z).collect();
                categorical(&scaled, rng)
            }
        }
    }
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
        let _ = i;
    }
    best
}

fn categorical<R: Rng>(dist: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (dist.len() - 1) as u32
}

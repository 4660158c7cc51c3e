//! Choosing which masked block positions to commit at each denoising step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::entropy;
use crate::tensor::{softmax, Real};
use crate::vocab::{is_emittable, Symbol, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Commit every position whose top probability exceeds `alpha`.
    Confidence,
    /// Commit the lowest-entropy positions while their summed entropy stays
    /// within `gamma`.
    EntropyBounded,
    /// Commit every masked position in a single step.
    OneStep,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Confidence => "confidence",
            Strategy::EntropyBounded => "eb",
            Strategy::OneStep => "one-step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(Strategy::Confidence),
            "eb" | "entropy-bounded" => Ok(Strategy::EntropyBounded),
            "one-step" => Ok(Strategy::OneStep),
            _ => Err(Error::InvalidArgument(format!("unknown unmasking strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnmaskingConfig {
    pub strategy: Strategy,
    pub alpha: Real,
    /// Entropy budget per step, in nats.
    pub gamma: Real,
    pub top_p: Option<Real>,
    /// Zero means greedy.
    pub temperature: Real,
}

impl Default for UnmaskingConfig {
    fn default() -> Self {
        UnmaskingConfig {
            strategy: Strategy::Confidence,
            alpha: 0.5,
            gamma: 1.0,
            top_p: None,
            temperature: 0.0,
        }
    }
}

impl UnmaskingConfig {
    pub fn confidence(alpha: Real) -> Self {
        UnmaskingConfig {
            strategy: Strategy::Confidence,
            alpha,
            ..Default::default()
        }
    }

    pub fn entropy_bounded(gamma: Real) -> Self {
        UnmaskingConfig {
            strategy: Strategy::EntropyBounded,
            gamma,
            ..Default::default()
        }
    }

    pub fn one_step() -> Self {
        UnmaskingConfig {
            strategy: Strategy::OneStep,
            ..Default::default()
        }
    }

    /// One position per step: no probability can exceed 1.
    pub fn one_per_step() -> Self {
        Self::confidence(1.0)
    }

    pub fn is_sampled(&self) -> bool {
        self.temperature > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma {} must be positive", self.gamma));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("top-p {p} outside (0, 1]"));
            }
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature {} must be finite and non-negative", self.temperature));
        }
        if self.strategy != Strategy::EntropyBounded && (self.top_p.is_some() || self.temperature > 0.0) {
            return bad("top-p and temperature apply only to the entropy-bounded strategy".into());
        }
        Ok(())
    }
}

/// Distribution over the vocabulary restricted to emittable symbols (bytes and
/// EOS), at the given temperature. A temperature of zero is treated as one.
pub fn emittable_distribution(logits: &[Real], temperature: Real) -> Vec<Real> {
    let scale = if temperature > 0.0 { 1.0 / temperature } else { 1.0 };
    let masked: Vec<Real> = logits
        .iter()
        .enumerate()
        .map(|(s, &l)| {
            if is_emittable(s as Symbol) {
                l * scale
            } else {
                Real::NEG_INFINITY
            }
        })
        .collect();
    softmax(&masked)
}

/// Highest-probability symbol, lowest id on ties.
pub fn argmax(probs: &[Real]) -> Symbol {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as Symbol
}

/// Greedy next symbol from raw logits, restricted to emittable symbols.
pub fn greedy(logits: &[Real]) -> Symbol {
    let mut best: Option<usize> = None;
    for (i, &l) in logits.iter().enumerate().take(VOCAB_SIZE) {
        if is_emittable(i as Symbol) && best.is_none_or(|b| l > logits[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0) as Symbol
}

/// Keeps the smallest set of most probable symbols whose mass reaches `p` and
/// renormalizes. Ties in probability keep the lower id first.
pub fn top_p_truncate(probs: &[Real], p: Real) -> Vec<Real> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        if probs[i] <= 0.0 {
            break;
        }
        out[i] = probs[i];
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    if mass > 0.0 {
        for v in &mut out {
            *v /= mass;
        }
    }
    out
}

pub fn sample(probs: &[Real], rng: &mut impl Rng) -> Symbol {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().map(|&p| p as f64).sum();
    let target = u * total;
    let mut acc = 0.0f64;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p as f64;
            last = i;
            if acc > target {
                return i as Symbol;
            }
        }
    }
    last as Symbol
}

/// Indices of positions whose top probability exceeds `alpha`; if none does,
/// the single most confident position (lowest index on ties).
pub fn select_by_confidence(max_probs: &[Real], alpha: Real) -> Vec<usize> {
    let picked: Vec<usize> = (0..max_probs.len()).filter(|&i| max_probs[i] > alpha).collect();
    if !picked.is_empty() || max_probs.is_empty() {
        return picked;
    }
    let mut best = 0;
    for (i, &p) in max_probs.iter().enumerate() {
        if p > max_probs[best] {
            best = i;
        }
    }
    vec![best]
}

pub fn select_unmask_confidence(dists: &[Vec<Real>], alpha: Real) -> Vec<usize> {
    let max_probs: Vec<Real> = dists
        .iter()
        .map(|d| d.iter().copied().fold(0.0, Real::max))
        .collect();
    select_by_confidence(&max_probs, alpha)
}

/// Positions in ascending entropy order (lowest index on ties), keeping the
/// longest prefix whose cumulative entropy is at most `gamma`, or the single
/// lowest-entropy position if even that exceeds it. Returned in position order.
pub fn select_by_entropy(entropies: &[Real], gamma: Real) -> Vec<usize> {
    if entropies.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    // Absorb summation rounding so a budget hit exactly is still admitted.
    let budget = gamma + gamma.abs() * 1e-12;
    let mut total = 0.0;
    let mut take = 0;
    for &i in &order {
        total += entropies[i];
        if total > budget {
            break;
        }
        take += 1;
    }
    let mut picked = order[..take.max(1)].to_vec();
    picked.sort_unstable();
    picked
}

/// Applies top-p truncation (when configured) to each distribution, then
/// selects by cumulative entropy.
pub fn select_unmask_eb(dists: &[Vec<Real>], gamma: Real, top_p: Option<Real>) -> Vec<usize> {
    let entropies: Vec<Real> = dists
        .iter()
        .map(|d| match top_p {
            Some(p) => entropy(&top_p_truncate(d, p)),
            None => entropy(d),
        })
        .collect();
    select_by_entropy(&entropies, gamma)
}

//! Cost and quality measures: parameter-load bandwidth, verification acceptance,
//! causal likelihood and lexical diversity.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::inference::DecodeTrace;
use crate::model::{build_inference_masks, HierarchicalModel};
use crate::patching::Patcher;
use crate::tensor::{logsumexp, Real, Tensor};
use crate::vocab::{Symbol, BOS};

/// Parameter counts per component and the storage width of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentParams {
    pub decoder: f64,
    pub encoder: f64,
    pub global: f64,
    pub bytes_per_param: f64,
}

impl ComponentParams {
    pub fn new(decoder: f64, encoder: f64, global: f64, bytes_per_param: f64) -> Result<Self> {
        if !(decoder > 0.0 && encoder > 0.0 && global > 0.0) {
            return Err(Error::InvalidArgument("parameter counts must be positive".into()));
        }
        if ![1.0, 2.0, 4.0, 8.0].contains(&bytes_per_param) {
            return Err(Error::InvalidArgument(format!(
                "bytes per parameter must be 1, 2, 4 or 8, got {bytes_per_param}"
            )));
        }
        Ok(ComponentParams {
            decoder,
            encoder,
            global,
            bytes_per_param,
        })
    }

    /// Exact counts of `model` at 16-bit storage.
    pub fn of_model(model: &HierarchicalModel) -> Self {
        let c = model.param_counts();
        ComponentParams {
            decoder: c.decoder as f64,
            encoder: c.encoder as f64,
            global: c.global as f64,
            bytes_per_param: 2.0,
        }
    }
}

/// Gigabytes of parameter loads: `b·(N_dec·P_dec + N_enc·(P_enc + P_glob)) / 1e9`,
/// with one encoder call and one global call per `N_enc`.
pub fn memory_bandwidth_gb(decoder_nfes: f64, encoder_global_nfes: f64, p: &ComponentParams) -> f64 {
    p.bytes_per_param * (decoder_nfes * p.decoder + encoder_global_nfes * (p.encoder + p.global)) / 1e9
}

pub fn memory_bandwidth(trace: &DecodeTrace, p: &ComponentParams) -> f64 {
    memory_bandwidth_gb(trace.decoder_nfes as f64, trace.encoder_global_nfes as f64, p)
}

pub fn acceptance_rate(trace: &DecodeTrace) -> Result<Real> {
    trace.acceptance_rate()
}

/// `Σ_{i≥1} log p(x_i | x_<i)` from one fully causal pass.
pub fn sequence_logprob(model: &HierarchicalModel, patcher: &Patcher, x: &[Symbol]) -> Result<Real> {
    if x.first() != Some(&BOS) {
        return Err(Error::InvalidArgument("scored sequence must begin with BOS".into()));
    }
    let seg = patcher.segment(x)?;
    let t = model.encode(x, &seg)?;
    let o = model.global_forward(&t)?;
    // causal rows never read an incomplete last latent
    let keep = seg.complete_patches();
    let dg = model.config.d_global;
    let o = Tensor::matrix(keep, dg, o.data()[..keep * dg].to_vec())?;
    let masks = build_inference_masks(x.len(), 0, &seg)?;
    let logits = model.decoder_logits(x, &o, &masks)?;
    Ok((1..x.len())
        .map(|i| {
            let row = logits.row(i - 1);
            row[x[i] as usize] - logsumexp(row)
        })
        .sum())
}

/// Words are maximal runs of bytes other than space, tab, newline and carriage
/// return. Empty text scores 0.
pub fn type_token_ratio(text: &[u8]) -> Real {
    let words: Vec<&[u8]> = text
        .split(|b| matches!(b, b' ' | b'\t' | b'\n' | b'\r'))
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return 0.0;
    }
    let types: HashSet<&[u8]> = words.iter().copied().collect();
    types.len() as Real / words.len() as Real
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the inputs are shorter than two.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_b() -> ComponentParams {
        ComponentParams::new(160e6, 19e6, 1.28e9, 2.0).unwrap()
    }

    #[test]
    fn bandwidth_examples() {
        let p = one_b();
        assert!((memory_bandwidth_gb(512.0, 250.0, &p) - 813.34).abs() < 0.005);
        assert!((memory_bandwidth_gb(512.0, 250.0, &p) - 814.95).abs() / 814.95 < 0.005);
        assert!((memory_bandwidth_gb(40.0, 16.0, &p) - 54.37).abs() < 0.005);
        assert_eq!(memory_bandwidth_gb(0.0, 0.0, &p), 0.0);
    }

    #[test]
    fn bandwidth_is_linear() {
        let p = one_b();
        let base = memory_bandwidth_gb(30.0, 7.0, &p);
        assert!((memory_bandwidth_gb(60.0, 14.0, &p) - 2.0 * base).abs() < 1e-9);
        let dec_only = memory_bandwidth_gb(30.0, 0.0, &p);
        assert!((memory_bandwidth_gb(90.0, 0.0, &p) - 3.0 * dec_only).abs() < 1e-9);
        let enc_only = memory_bandwidth_gb(0.0, 7.0, &p);
        assert!((memory_bandwidth_gb(0.0, 21.0, &p) - 3.0 * enc_only).abs() < 1e-9);
        let p4 = ComponentParams { bytes_per_param: 4.0, ..p };
        assert!((memory_bandwidth_gb(30.0, 7.0, &p4) - 2.0 * base).abs() < 1e-9);
    }

    #[test]
    fn component_params_validation() {
        assert!(ComponentParams::new(1.0, 1.0, 1.0, 3.0).is_err());
        assert!(ComponentParams::new(0.0, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn ttr_examples() {
        assert_eq!(type_token_ratio(b"a a a a"), 0.25);
        assert_eq!(type_token_ratio(b"a b c d"), 1.0);
        assert_eq!(type_token_ratio(b"  a \t\n a\r\n  b  "), type_token_ratio(b"a a b"));
        assert_eq!(type_token_ratio(b""), 0.0);
        assert_eq!(type_token_ratio(b" \n "), 0.0);
    }

    #[test]
    fn spearman_oracle() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // ties use average ranks: ranks a = [1.5,1.5,3], b = [1,2,3]
        let r = spearman(&[5.0, 5.0, 9.0], &[1.0, 2.0, 3.0]).unwrap();
        let expect = 1.5 / 3f64.sqrt();
        assert!((r - expect).abs() < 1e-12, "{r}");
    }
}

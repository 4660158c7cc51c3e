//! Entropy-driven patch segmentation backed by an add-λ smoothed byte n-gram.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::vocab::{Symbol, BOS, VOCAB_SIZE};

pub const DEFAULT_ORDER: usize = 2;
pub const DEFAULT_SMOOTHING: Real = 0.1;
pub const DEFAULT_MAX_PATCH: usize = 8;
pub const MAX_ORDER: usize = 7;

#[derive(Debug, Clone, PartialEq)]
struct Context {
    /// Sorted `(symbol, count)` pairs.
    counts: Vec<(Symbol, u64)>,
    total: u64,
    entropy: Real,
}

/// Order-k byte model with add-λ smoothing over the full 260-symbol vocabulary.
/// Contexts never seen in training back off to the smoothed unigram.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyModel {
    order: usize,
    smoothing: Real,
    unigram: Vec<u64>,
    unigram_total: u64,
    unigram_entropy: Real,
    contexts: HashMap<u64, Context>,
}

fn context_key(ctx: &[Symbol]) -> u64 {
    ctx.iter().fold(0u64, |k, &s| (k << 9) | s as u64)
}

/// Entropy in nats of the add-λ distribution with the given sparse counts.
fn smoothed_entropy<'a>(counts: impl Iterator<Item = &'a u64>, total: u64, lambda: Real) -> Real {
    let v = VOCAB_SIZE as Real;
    let denom = total as Real + lambda * v;
    if denom == 0.0 {
        return v.ln();
    }
    let mut h = 0.0;
    let mut seen = 0usize;
    for &c in counts {
        if c == 0 {
            continue;
        }
        seen += 1;
        let p = (c as Real + lambda) / denom;
        h -= p * p.ln();
    }
    if lambda > 0.0 {
        let q = lambda / denom;
        h -= (VOCAB_SIZE - seen) as Real * q * q.ln();
    }
    h
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(probs: &[Real]) -> Real {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

impl EntropyModel {
    /// Counts next-symbol statistics over `sequences`. Each sequence is scored
    /// from its second symbol on; contexts reaching before the start are padded
    /// with BOS.
    pub fn fit<S: AsRef<[Symbol]>>(sequences: &[S], order: usize, smoothing: Real) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::InvalidArgument(format!("order {order} above {MAX_ORDER}")));
        }
        if !(smoothing > 0.0) {
            return Err(Error::InvalidArgument(format!("smoothing must be positive, got {smoothing}")));
        }
        let mut unigram = vec![0u64; VOCAB_SIZE];
        let mut raw: HashMap<u64, HashMap<Symbol, u64>> = HashMap::new();
        let mut ctx = vec![BOS; order];
        let mut any = false;
        for seq in sequences {
            let seq = seq.as_ref();
            for i in 1..seq.len() {
                any = true;
                fill_context(&mut ctx, seq, i);
                let s = seq[i];
                if s as usize >= VOCAB_SIZE {
                    return Err(Error::InvalidArgument(format!("symbol {s} outside vocabulary")));
                }
                unigram[s as usize] += 1;
                *raw.entry(context_key(&ctx)).or_default().entry(s).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let contexts = raw
            .into_iter()
            .map(|(k, m)| {
                let mut counts: Vec<(Symbol, u64)> = m.into_iter().collect();
                counts.sort_unstable();
                let total = counts.iter().map(|c| c.1).sum();
                (
                    k,
                    Context {
                        counts,
                        total,
                        entropy: 0.0,
                    },
                )
            })
            .collect();
        let unigram_total = unigram.iter().sum();
        let mut model = EntropyModel {
            order,
            smoothing,
            unigram,
            unigram_total,
            unigram_entropy: 0.0,
            contexts,
        };
        model.refresh();
        Ok(model)
    }

    /// Fits on raw bytes treated as one BOS-prefixed sequence.
    pub fn fit_bytes(corpus: &[u8], order: usize, smoothing: Real) -> Result<Self> {
        Self::fit(&[crate::vocab::with_bos(corpus)], order, smoothing)
    }

    fn refresh(&mut self) {
        let lambda = self.smoothing;
        self.unigram_entropy = smoothed_entropy(self.unigram.iter(), self.unigram_total, lambda);
        for c in self.contexts.values_mut() {
            c.entropy = smoothed_entropy(c.counts.iter().map(|p| &p.1), c.total, lambda);
        }
    }

    /// Same counts under a different smoothing constant. Zero is allowed here
    /// (maximum-likelihood estimates) for inspection.
    pub fn with_smoothing(&self, smoothing: Real) -> Self {
        let mut m = self.clone();
        m.smoothing = smoothing.max(0.0);
        m.refresh();
        m
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> Real {
        self.smoothing
    }

    fn lookup(&self, prefix: &[Symbol]) -> Option<&Context> {
        let mut ctx = vec![BOS; self.order];
        fill_context(&mut ctx, prefix, prefix.len());
        self.contexts.get(&context_key(&ctx))
    }

    /// Next-symbol distribution after `prefix`.
    pub fn distribution(&self, prefix: &[Symbol]) -> Vec<Real> {
        let lambda = self.smoothing;
        let (counts, total): (Vec<u64>, u64) = match self.lookup(prefix) {
            Some(c) => {
                let mut dense = vec![0u64; VOCAB_SIZE];
                for &(s, n) in &c.counts {
                    dense[s as usize] = n;
                }
                (dense, c.total)
            }
            None => (self.unigram.clone(), self.unigram_total),
        };
        let denom = total as Real + lambda * VOCAB_SIZE as Real;
        if denom == 0.0 {
            return vec![1.0 / VOCAB_SIZE as Real; VOCAB_SIZE];
        }
        counts.iter().map(|&c| (c as Real + lambda) / denom).collect()
    }

    /// Entropy in nats of the next-symbol distribution after `prefix`.
    pub fn next_byte_entropy(&self, prefix: &[Symbol]) -> Real {
        match self.lookup(prefix) {
            Some(c) => c.entropy,
            None => self.unigram_entropy,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.order as u32).to_le_bytes())?;
        w.write_all(&(self.smoothing as f64).to_le_bytes())?;
        for &c in &self.unigram {
            w.write_all(&c.to_le_bytes())?;
        }
        let mut keys: Vec<&u64> = self.contexts.keys().collect();
        keys.sort_unstable();
        w.write_all(&(keys.len() as u64).to_le_bytes())?;
        for k in keys {
            let c = &self.contexts[k];
            w.write_all(&k.to_le_bytes())?;
            w.write_all(&(c.counts.len() as u32).to_le_bytes())?;
            for &(s, n) in &c.counts {
                w.write_all(&s.to_le_bytes())?;
                w.write_all(&n.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let order = read_u32(r)? as usize;
        let smoothing = read_f64(r)? as Real;
        if order > MAX_ORDER || !(smoothing >= 0.0) {
            return Err(Error::Format(format!("bad entropy model header ({order}, {smoothing})")));
        }
        let mut unigram = Vec::with_capacity(VOCAB_SIZE);
        for _ in 0..VOCAB_SIZE {
            unigram.push(read_u64(r)?);
        }
        let n = read_u64(r)?;
        let mut contexts = HashMap::new();
        for _ in 0..n {
            let k = read_u64(r)?;
            let len = read_u32(r)? as usize;
            let mut counts = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 2];
                r.read_exact(&mut b)?;
                let s = u16::from_le_bytes(b);
                if s as usize >= VOCAB_SIZE {
                    return Err(Error::Format(format!("symbol {s} in entropy table")));
                }
                counts.push((s, read_u64(r)?));
            }
            let total = counts.iter().map(|c| c.1).sum();
            contexts.insert(
                k,
                Context {
                    counts,
                    total,
                    entropy: 0.0,
                },
            );
        }
        let unigram_total = unigram.iter().sum();
        let mut m = EntropyModel {
            order,
            smoothing,
            unigram,
            unigram_total,
            unigram_entropy: 0.0,
            contexts,
        };
        m.refresh();
        Ok(m)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Writes the `ctx.len()` symbols preceding position `i` of `seq` into `ctx`,
/// padding with BOS before the start.
fn fill_context(ctx: &mut [Symbol], seq: &[Symbol], i: usize) {
    let k = ctx.len();
    for (slot, c) in ctx.iter_mut().enumerate() {
        let back = k - slot;
        *c = if back <= i { seq[i - back] } else { BOS };
    }
}

/// Why a patch begins where it does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// The BOS patch.
    Bos,
    /// First byte after BOS always opens a patch.
    AfterBos,
    /// Entropy after the previous byte exceeded the threshold.
    Entropy(Real),
    /// The previous patch reached the maximum length.
    MaxSize,
    /// Supplied explicitly rather than derived from a patcher.
    Given,
}

/// Patch boundaries over a symbol sequence. Indices are 0-based: `starts[0] == 0`
/// is the BOS patch and patch `m` covers `starts[m]..starts[m+1]` (the last patch
/// runs to `len`).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSegmentation {
    starts: Vec<usize>,
    triggers: Vec<Trigger>,
    len: usize,
    /// Whether the rule fires a new patch at position `len`, i.e. whether the
    /// last patch is already complete.
    closed: Option<Trigger>,
}

impl PatchSegmentation {
    /// Builds a segmentation from explicit 0-based starts. Mostly for tests and
    /// mask construction; `closed` records whether the last patch is complete.
    pub fn from_starts(starts: Vec<usize>, len: usize, closed: bool) -> Result<Self> {
        if starts.first() != Some(&0) || (len > 1 && starts.get(1) != Some(&1)) {
            return Err(Error::Segmentation(format!(
                "starts {starts:?} must begin with the BOS patch [0, 1, ...]"
            )));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) || starts.last().is_some_and(|&s| s >= len) {
            return Err(Error::Segmentation(format!(
                "starts {starts:?} are not strictly increasing within {len}"
            )));
        }
        let triggers = starts
            .iter()
            .enumerate()
            .map(|(i, _)| match i {
                0 => Trigger::Bos,
                1 => Trigger::AfterBos,
                _ => Trigger::Given,
            })
            .collect();
        let closed = (closed || len == 1).then_some(Trigger::Given);
        Ok(PatchSegmentation {
            starts,
            triggers,
            len,
            closed,
        })
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn triggers(&self) -> &[Trigger] {
        &self.triggers
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_patches(&self) -> usize {
        self.starts.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed.is_some()
    }

    pub fn patch_end(&self, m: usize) -> usize {
        self.starts.get(m + 1).copied().unwrap_or(self.len)
    }

    pub fn patch_len(&self, m: usize) -> usize {
        self.patch_end(m) - self.starts[m]
    }

    /// Index of the patch containing position `i`.
    pub fn patch_of(&self, i: usize) -> usize {
        self.starts.partition_point(|&s| s <= i) - 1
    }

    /// Whether position `i` is the last byte of its patch: the next position
    /// starts a patch, or `i` is the final position of a closed segmentation.
    pub fn is_patch_final(&self, i: usize) -> bool {
        if i + 1 < self.len {
            self.starts.binary_search(&(i + 1)).is_ok()
        } else {
            self.is_closed()
        }
    }

    /// `(start, len)` per patch.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        (0..self.num_patches()).map(|m| (self.starts[m], self.patch_len(m))).collect()
    }

    /// Number of patches that are known to be complete.
    pub fn complete_patches(&self) -> usize {
        self.num_patches() - usize::from(!self.is_closed())
    }

    /// The segmentation of the first `n` positions. Valid because the rule is causal.
    pub fn truncated(&self, n: usize, patcher: &Patcher, x: &[Symbol]) -> Self {
        let keep = self.starts.partition_point(|&s| s < n);
        let mut seg = PatchSegmentation {
            starts: self.starts[..keep].to_vec(),
            triggers: self.triggers[..keep].to_vec(),
            len: n,
            closed: None,
        };
        seg.closed = patcher.boundary(&x[..n], *seg.starts.last().unwrap_or(&0));
        seg
    }
}

/// Entropy model plus the boundary rule parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Patcher {
    pub model: EntropyModel,
    pub threshold: Real,
    pub max_patch: usize,
}

impl Patcher {
    pub fn new(model: EntropyModel, threshold: Real, max_patch: usize) -> Result<Self> {
        if max_patch == 0 {
            return Err(Error::InvalidArgument("max patch size must be at least 1".into()));
        }
        Ok(Patcher {
            model,
            threshold,
            max_patch,
        })
    }

    /// Whether a patch starts at position `prefix.len()` given that the current
    /// patch began at `last_start`. Depends only on `prefix`.
    pub fn boundary(&self, prefix: &[Symbol], last_start: usize) -> Option<Trigger> {
        let i = prefix.len();
        if i == 0 {
            return None;
        }
        if i == 1 {
            return Some(Trigger::AfterBos);
        }
        let h = self.model.next_byte_entropy(prefix);
        if h > self.threshold {
            Some(Trigger::Entropy(h))
        } else if i - last_start >= self.max_patch {
            Some(Trigger::MaxSize)
        } else {
            None
        }
    }

    /// Segments `x`, which must begin with BOS.
    pub fn segment(&self, x: &[Symbol]) -> Result<PatchSegmentation> {
        if x.first() != Some(&BOS) {
            return Err(Error::Segmentation("sequence must begin with BOS".into()));
        }
        let mut seg = PatchSegmentation {
            starts: vec![0],
            triggers: vec![Trigger::Bos],
            len: 1,
            closed: Some(Trigger::AfterBos),
        };
        self.extend(&mut seg, x)?;
        Ok(seg)
    }

    /// Extends `seg` (a segmentation of a prefix of `x`) to cover all of `x`.
    pub fn extend(&self, seg: &mut PatchSegmentation, x: &[Symbol]) -> Result<()> {
        if seg.len > x.len() || seg.len == 0 {
            return Err(Error::Segmentation(format!(
                "cannot extend a segmentation of {} positions to {}",
                seg.len,
                x.len()
            )));
        }
        for i in seg.len..x.len() {
            if let Some(t) = seg.closed.take() {
                seg.starts.push(i);
                seg.triggers.push(t);
            }
            seg.len = i + 1;
            seg.closed = self.boundary(&x[..=i], *seg.starts.last().unwrap());
        }
        Ok(())
    }

    /// Chooses a threshold whose mean patch length (BOS patch excluded) on
    /// `corpus` is within 5% of `target_avg`, by bisection. Returns the best
    /// threshold found and its mean patch length; logs a warning if the target
    /// was not reached.
    pub fn calibrate<S: AsRef<[Symbol]>>(
        model: &EntropyModel,
        corpus: &[S],
        target_avg: Real,
        max_patch: usize,
    ) -> Result<(Real, Real)> {
        if !(target_avg > 1.0 && target_avg <= max_patch as Real) {
            return Err(Error::InvalidArgument(format!(
                "target patch size {target_avg} outside (1, {max_patch}]"
            )));
        }
        let entropies: Vec<Vec<Real>> = corpus
            .iter()
            .map(|s| {
                let s = s.as_ref();
                (0..=s.len()).map(|i| if i < 2 { 0.0 } else { model.next_byte_entropy(&s[..i]) }).collect()
            })
            .collect();
        if entropies.iter().all(|e| e.len() <= 2) {
            return Err(Error::EmptyCorpus);
        }
        let avg = |thr: Real| mean_patch_len(&entropies, thr, max_patch);
        let (mut lo, mut hi) = (0.0, (VOCAB_SIZE as Real).ln() + 1.0);
        let mut best = (hi, avg(hi));
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            let a = avg(mid);
            if (a - target_avg).abs() < (best.1 - target_avg).abs() {
                best = (mid, a);
            }
            if (a - target_avg).abs() < 1e-3 * target_avg {
                break;
            }
            if a < target_avg {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (best.1 - target_avg).abs() > 0.05 * target_avg {
            log::warn!(
                "patch calibration reached mean {:.3} for target {:.3} (threshold {:.4})",
                best.1,
                target_avg,
                best.0
            );
        }
        Ok(best)
    }
}

/// Mean non-BOS patch length given precomputed entropies: `entropies[s][i]` is
/// the entropy after the first `i` symbols of sequence `s`.
fn mean_patch_len(entropies: &[Vec<Real>], threshold: Real, max_patch: usize) -> Real {
    let (mut bytes, mut patches) = (0usize, 0usize);
    for e in entropies {
        let n = e.len() - 1;
        if n < 2 {
            continue;
        }
        let mut last = 1;
        patches += 1;
        for (i, &h) in e.iter().enumerate().take(n).skip(2) {
            if h > threshold || i - last >= max_patch {
                last = i;
                patches += 1;
            }
        }
        bytes += n - 1;
    }
    if patches == 0 {
        0.0
    } else {
        bytes as Real / patches as Real
    }
}

/// Mean non-BOS patch length of `patcher` over `corpus`.
pub fn mean_patch_length<S: AsRef<[Symbol]>>(patcher: &Patcher, corpus: &[S]) -> Result<Real> {
    let (mut bytes, mut patches) = (0usize, 0usize);
    for s in corpus {
        let seg = patcher.segment(s.as_ref())?;
        bytes += seg.len() - 1;
        patches += seg.num_patches() - 1;
    }
    Ok(if patches == 0 { 0.0 } else { bytes as Real / patches as Real })
}

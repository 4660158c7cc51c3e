//! Training-time block construction, absorbing-mask corruption and the
//! combined clean + masked objective.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{build_training_masks, Bound, HierarchicalModel};
use crate::patching::PatchSegmentation;
use crate::tensor::Real;
use crate::vocab::{Symbol, MASK, PAD};

/// One fixed-size block per patch after the BOS patch. Block `k` copies
/// `x[s_{k+1} .. s_{k+1}+B]`, padding with PAD past the end of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    block_size: usize,
    starts: Vec<usize>,
    tokens: Vec<Symbol>,
    pad: Vec<bool>,
}

impl BlockPlan {
    pub fn build(x: &[Symbol], seg: &PatchSegmentation, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidArgument("block size must be at least 1".into()));
        }
        if seg.len() != x.len() {
            return Err(Error::Segmentation(format!(
                "segmentation of {} positions for {} symbols",
                seg.len(),
                x.len()
            )));
        }
        if seg.num_patches() < 2 {
            return Err(Error::Segmentation("need at least two patches to form a block".into()));
        }
        let starts = seg.starts()[1..].to_vec();
        let mut tokens = Vec::with_capacity(starts.len() * block_size);
        let mut pad = Vec::with_capacity(tokens.capacity());
        for &s in &starts {
            for i in s..s + block_size {
                let inside = i < x.len();
                tokens.push(if inside { x[i] } else { PAD });
                pad.push(!inside);
            }
        }
        Ok(BlockPlan {
            block_size,
            starts,
            tokens,
            pad,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.starts.len()
    }

    /// Source position of each block's first slot.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// All block slots, block after block.
    pub fn tokens(&self) -> &[Symbol] {
        &self.tokens
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad
    }

    pub fn block(&self, k: usize) -> &[Symbol] {
        &self.tokens[k * self.block_size..(k + 1) * self.block_size]
    }

    /// Source positions of block `k`'s slots.
    pub fn source_positions(&self, k: usize) -> std::ops::Range<usize> {
        self.starts[k]..self.starts[k] + self.block_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBlocks {
    pub t: Real,
    pub tokens: Vec<Symbol>,
    pub masked: Vec<bool>,
}

/// Draws `t ~ U(0, 1)`, excluding 0.
pub fn sample_timestep(rng: &mut impl Rng) -> Real {
    loop {
        let t: f64 = rng.random();
        if t > 0.0 {
            return t as Real;
        }
    }
}

/// Replaces each non-PAD slot with MASK independently with probability `t`.
pub fn corrupt(plan: &BlockPlan, t: Real, rng: &mut impl Rng) -> Result<CorruptedBlocks> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("timestep {t} outside (0, 1)")));
    }
    let mut tokens = plan.tokens.clone();
    let mut masked = vec![false; tokens.len()];
    for i in 0..tokens.len() {
        let u: f64 = rng.random();
        if !plan.pad[i] && (u as Real) < t {
            tokens[i] = MASK;
            masked[i] = true;
        }
    }
    Ok(CorruptedBlocks { t, tokens, masked })
}

/// Loss nodes of one example.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub clean: Var,
    pub mask: Var,
    pub total: Var,
    pub logits: Var,
    /// Decoder input embeddings, clean rows first and then block rows.
    pub decoder_input: Var,
}

/// Target and weight vectors over the decoder rows `[x; blocks]`: clean rows
/// predict the next byte (the last clean row has no target), masked non-PAD
/// block slots predict their own clean byte.
pub fn loss_targets(x: &[Symbol], plan: &BlockPlan, corrupted: &CorruptedBlocks) -> (Vec<usize>, Vec<Real>, Vec<Real>) {
    let n = x.len();
    let total = n + plan.tokens.len();
    let mut targets = vec![0usize; total];
    let mut clean_w = vec![0.0; total];
    let mut mask_w = vec![0.0; total];
    for i in 0..n.saturating_sub(1) {
        targets[i] = x[i + 1] as usize;
        clean_w[i] = 1.0;
    }
    for (j, (&tok, &m)) in plan.tokens.iter().zip(&corrupted.masked).enumerate() {
        targets[n + j] = tok as usize;
        if m && !plan.pad[j] {
            mask_w[n + j] = 1.0;
        }
    }
    (targets, clean_w, mask_w)
}

/// Builds `L_clean`, `L_mask = (1/t)·Σ masked NLL` and
/// `L_total = L_clean + mask_weight·L_mask` for one example in `g`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_graph(
    model: &HierarchicalModel,
    g: &mut Graph,
    b: &Bound,
    x: &[Symbol],
    seg: &PatchSegmentation,
    plan: &BlockPlan,
    corrupted: &CorruptedBlocks,
    mask_weight: Real,
) -> Result<LossVars> {
    let t = corrupted.t;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("timestep {t} outside (0, 1)")));
    }
    let masks = build_training_masks(seg, plan)?;
    let mut input = x.to_vec();
    input.extend_from_slice(&corrupted.tokens);
    let (logits, decoder_input) = model.forward_graph_parts(g, b, x, seg, &input, &masks)?;
    let (targets, clean_w, mask_w) = loss_targets(x, plan, corrupted);
    let clean = g.cross_entropy(logits, &targets, &clean_w)?;
    let masked_nll = g.cross_entropy(logits, &targets, &mask_w)?;
    let mask = g.scale(masked_nll, 1.0 / t);
    let weighted = if mask_weight == 1.0 { mask } else { g.scale(mask, mask_weight) };
    let total = g.add(clean, weighted)?;
    Ok(LossVars {
        clean,
        mask,
        total,
        logits,
        decoder_input,
    })
}

/// `(L_clean, L_mask, L_total)` for one example without recording gradients.
pub fn combined_loss(
    model: &HierarchicalModel,
    x: &[Symbol],
    seg: &PatchSegmentation,
    plan: &BlockPlan,
    corrupted: &CorruptedBlocks,
) -> Result<(Real, Real, Real)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let l = combined_loss_graph(model, &mut g, &b, x, seg, plan, corrupted, 1.0)?;
    Ok((g.value(l.clean)[0], g.value(l.mask)[0], g.value(l.total)[0]))
}

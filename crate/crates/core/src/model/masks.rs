//! Decoder self-attention masks, cross-attention assignments and rotary
//! positions for generation and for block-diffusion training.

use crate::diffusion::BlockPlan;
use crate::error::{Error, Result};
use crate::patching::PatchSegmentation;
use crate::tensor::Mask;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskSpec {
    pub self_mask: Mask,
    /// 0-based latent index each decoder row cross-attends to.
    pub cross_assign: Vec<usize>,
    /// Rotary position of each decoder row.
    pub positions: Vec<usize>,
}

impl AttentionMaskSpec {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Latent assigned to clean row `i`: its own patch for the last byte of a
/// patch, the previous patch otherwise.
fn clean_assign(seg: &PatchSegmentation, i: usize, last_is_final: bool) -> Result<usize> {
    let p = seg.patch_of(i);
    let is_final = if i + 1 == seg.len() {
        last_is_final
    } else {
        seg.is_patch_final(i)
    };
    if is_final {
        Ok(p)
    } else if p == 0 {
        Err(Error::Segmentation(format!("row {i} in the BOS patch has no previous latent")))
    } else {
        Ok(p - 1)
    }
}

/// Masks for a prefix of `n` rows followed by `b` block rows.
///
/// Prefix rows are causal; block rows see the whole prefix and the whole block.
/// With `b > 0` the last prefix row is treated as the end of its patch, so it
/// and every block row read the last latent. With `b == 0` the last row ends a
/// patch only if the segmentation is closed.
pub fn build_inference_masks(n: usize, b: usize, seg: &PatchSegmentation) -> Result<AttentionMaskSpec> {
    if n == 0 {
        return Err(Error::InvalidArgument("prefix length must be positive".into()));
    }
    if seg.len() != n {
        return Err(Error::Segmentation(format!(
            "segmentation covers {} positions, prefix has {n}",
            seg.len()
        )));
    }
    let total = n + b;
    let self_mask = Mask::from_fn(total, total, |i, j| if i < n { j <= i } else { true });
    let last = seg.num_patches() - 1;
    let mut cross_assign = Vec::with_capacity(total);
    for i in 0..n {
        cross_assign.push(clean_assign(seg, i, b > 0 || seg.is_closed())?);
    }
    cross_assign.extend(std::iter::repeat_n(last, b));
    Ok(AttentionMaskSpec {
        self_mask,
        cross_assign,
        positions: (0..total).collect(),
    })
}

/// Masks over `[x; block_0; ...; block_{M-2}]`. Clean rows are causal among
/// themselves. Block `k` starts at patch start `s_{k+1}`, sees its own block
/// and clean rows before `s_{k+1}`, reads latent `k`, and takes rotary
/// positions `s_{k+1} ..`.
pub fn build_training_masks(seg: &PatchSegmentation, plan: &BlockPlan) -> Result<AttentionMaskSpec> {
    let n = seg.len();
    let m = seg.num_patches();
    if plan.num_blocks() + 1 != m || plan.starts() != &seg.starts()[1..] {
        return Err(Error::Segmentation(format!(
            "plan with {} blocks does not match {} patches",
            plan.num_blocks(),
            m
        )));
    }
    let bs = plan.block_size();
    let total = n + bs * plan.num_blocks();
    let starts = plan.starts();
    let self_mask = Mask::from_fn(total, total, |i, j| {
        if i < n {
            j <= i
        } else {
            let k = (i - n) / bs;
            if j < n {
                j < starts[k]
            } else {
                (j - n) / bs == k
            }
        }
    });
    let mut cross_assign = Vec::with_capacity(total);
    let mut positions: Vec<usize> = (0..n).collect();
    for i in 0..n {
        cross_assign.push(clean_assign(seg, i, true)?);
    }
    for (k, &s) in starts.iter().enumerate() {
        cross_assign.extend(std::iter::repeat_n(k, bs));
        positions.extend(s..s + bs);
    }
    Ok(AttentionMaskSpec {
        self_mask,
        cross_assign,
        positions,
    })
}

//! Generation engines: autoregressive, block diffusion, self-speculative and
//! diffusion-drafted verification, all with per-component call accounting.

mod engines;
pub mod session;
pub mod unmask;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::vocab::Symbol;

pub use engines::{
    generate, generate_ar, generate_blt_d, generate_blt_dv, generate_blt_s, stepwise_logprob, EngineSpec,
    Generation, RunOptions,
};
pub use session::{Assign, DecodeOut, Session, SessionStats};
pub use unmask::{
    select_by_confidence, select_by_entropy, select_unmask_confidence, select_unmask_eb, Strategy, UnmaskingConfig,
};

/// Work done by one generation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace {
    pub engine: String,
    pub block_size: Option<usize>,
    pub window: Option<usize>,
    pub unmasking: Option<UnmaskingConfig>,
    pub decoder_nfes: usize,
    pub encoder_global_nfes: usize,
    /// Denoising steps per generated block.
    pub block_steps: Vec<usize>,
    pub drafted: usize,
    pub accepted: usize,
    pub output: Vec<u8>,
    pub seed: u64,
}

/// The line-delimited JSON form of a [`DecodeTrace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub engine: String,
    #[serde(rename = "B")]
    pub block_size: Option<usize>,
    pub k: Option<usize>,
    pub strategy: Option<String>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub top_p: Option<f64>,
    pub decoder_nfes: usize,
    pub encoder_global_nfes: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub output_len: usize,
    pub seed: u64,
}

impl DecodeTrace {
    pub fn record(&self) -> TraceRecord {
        let u = self.unmasking.as_ref();
        TraceRecord {
            engine: self.engine.clone(),
            block_size: self.block_size,
            k: self.window,
            strategy: u.map(|c| c.strategy.name().to_string()),
            alpha: u
                .filter(|c| c.strategy == Strategy::Confidence)
                .map(|c| c.alpha as f64),
            gamma: u
                .filter(|c| c.strategy == Strategy::EntropyBounded)
                .map(|c| c.gamma as f64),
            top_p: u.and_then(|c| c.top_p).map(|p| p as f64),
            decoder_nfes: self.decoder_nfes,
            encoder_global_nfes: self.encoder_global_nfes,
            drafted: self.drafted,
            accepted: self.accepted,
            output_len: self.output.len(),
            seed: self.seed,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.record()).expect("trace record serializes")
    }

    /// Fraction of drafted bytes that verification accepted.
    pub fn acceptance_rate(&self) -> Result<Real> {
        if self.drafted == 0 {
            return Err(Error::NoDrafts);
        }
        Ok(self.accepted as Real / self.drafted as Real)
    }
}

/// Compares greedy predictions against a draft. `predictions[j]` is the model's
/// byte for draft slot `j`; the extra last entry is the byte after the whole
/// draft. Returns the accepted prefix followed by the correction, or by the
/// free byte when every drafted byte matched.
pub fn verify_draft(predictions: &[Symbol], draft: &[Symbol]) -> Result<Vec<Symbol>> {
    if draft.is_empty() {
        return Err(Error::InvalidArgument("draft length must be at least 1".into()));
    }
    if predictions.len() != draft.len() + 1 {
        return Err(Error::Shape(format!(
            "{} predictions for a draft of {}",
            predictions.len(),
            draft.len()
        )));
    }
    let a = draft.iter().zip(predictions).take_while(|(d, y)| d == y).count();
    let mut out = draft[..a].to_vec();
    out.push(predictions[a]);
    Ok(out)
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::HierarchicalModel;
use crate::patching::Patcher;
use crate::tensor::{logsumexp, Real};
use crate::vocab::{Symbol, EOS, MASK};

use super::session::{Assign, Session};
use super::unmask::{
    emittable_distribution, greedy, sample, select_unmask_confidence, select_unmask_eb, top_p_truncate, Strategy,
    UnmaskingConfig,
};
use super::{verify_draft, DecodeTrace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EngineSpec {
    Ar,
    BltD { block_size: usize, unmasking: UnmaskingConfig },
    BltS { window: usize },
    BltDv { block_size: usize, unmasking: UnmaskingConfig },
}

impl EngineSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EngineSpec::Ar => "ar",
            EngineSpec::BltD { .. } => "blt-d",
            EngineSpec::BltS { .. } => "blt-s",
            EngineSpec::BltDv { .. } => "blt-dv",
        }
    }

    pub fn is_verifying(&self) -> bool {
        matches!(self, EngineSpec::BltS { .. } | EngineSpec::BltDv { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EngineSpec::Ar => Ok(()),
            EngineSpec::BltS { window } => {
                if window == 0 {
                    return Err(Error::InvalidArgument("draft window must be at least 1".into()));
                }
                Ok(())
            }
            EngineSpec::BltD { block_size, unmasking } | EngineSpec::BltDv { block_size, unmasking } => {
                if block_size == 0 {
                    return Err(Error::InvalidArgument("block size must be at least 1".into()));
                }
                unmasking.validate()?;
                if matches!(self, EngineSpec::BltDv { .. }) && unmasking.is_sampled() {
                    return Err(Error::InvalidArgument("verification decoding is greedy only".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Seeds sampling; greedy engines ignore it.
    pub seed: u64,
    /// Reuse latents and decoder states across steps.
    pub caching: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            caching: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub output: Vec<u8>,
    pub trace: DecodeTrace,
}

pub fn generate(
    model: &HierarchicalModel,
    patcher: &Patcher,
    prompt: &[Symbol],
    length: usize,
    spec: &EngineSpec,
    opts: &RunOptions,
) -> Result<Generation> {
    spec.validate()?;
    let mut run = Run::new(model, patcher, prompt, spec, opts)?;
    match *spec {
        EngineSpec::Ar => run.ar(length)?,
        EngineSpec::BltD { block_size, unmasking } => run.blt_d(length, block_size, &unmasking)?,
        EngineSpec::BltS { window } => run.speculative(length, |r| r.draft_ar(window))?,
        EngineSpec::BltDv { block_size, unmasking } => {
            run.speculative(length, |r| r.draft_diffusion(block_size, &unmasking))?
        }
    }
    Ok(run.finish(length))
}

pub fn generate_ar(model: &HierarchicalModel, patcher: &Patcher, prompt: &[Symbol], length: usize) -> Result<Generation> {
    generate(model, patcher, prompt, length, &EngineSpec::Ar, &RunOptions::default())
}

pub fn generate_blt_d(
    model: &HierarchicalModel,
    patcher: &Patcher,
    prompt: &[Symbol],
    length: usize,
    block_size: usize,
    unmasking: &UnmaskingConfig,
    seed: u64,
) -> Result<Generation> {
    let spec = EngineSpec::BltD {
        block_size,
        unmasking: *unmasking,
    };
    generate(model, patcher, prompt, length, &spec, &RunOptions { seed, caching: true })
}

pub fn generate_blt_s(
    model: &HierarchicalModel,
    patcher: &Patcher,
    prompt: &[Symbol],
    length: usize,
    window: usize,
) -> Result<Generation> {
    generate(model, patcher, prompt, length, &EngineSpec::BltS { window }, &RunOptions::default())
}

pub fn generate_blt_dv(
    model: &HierarchicalModel,
    patcher: &Patcher,
    prompt: &[Symbol],
    length: usize,
    block_size: usize,
    unmasking: &UnmaskingConfig,
) -> Result<Generation> {
    let spec = EngineSpec::BltDv {
        block_size,
        unmasking: *unmasking,
    };
    generate(model, patcher, prompt, length, &spec, &RunOptions::default())
}

/// Sum of `log p(x_i | x_<i)` over `i ≥ 1`, accumulated one position at a time
/// exactly as autoregressive decoding visits them.
pub fn stepwise_logprob(model: &HierarchicalModel, patcher: &Patcher, x: &[Symbol]) -> Result<Real> {
    let mut s = Session::new(model, patcher, &x[..x.len().min(1)], true)?;
    s.encode(false)?;
    let mut total = 0.0;
    for &next in &x[1..] {
        let out = s.decode(&[], Assign::Causal, s.len() - 1)?;
        let row = &out.prefix[0];
        total += row[next as usize] - logsumexp(row);
        s.push(&[next])?;
        if s.segmentation().is_closed() {
            s.encode(false)?;
        }
    }
    Ok(total)
}

struct Run<'m> {
    session: Session<'m>,
    prompt_len: usize,
    trace: DecodeTrace,
    rng: ChaCha8Rng,
}

impl<'m> Run<'m> {
    fn new(
        model: &'m HierarchicalModel,
        patcher: &'m Patcher,
        prompt: &[Symbol],
        spec: &EngineSpec,
        opts: &RunOptions,
    ) -> Result<Self> {
        let session = Session::new(model, patcher, prompt, opts.caching)?;
        let (block_size, window, unmasking) = match *spec {
            EngineSpec::Ar => (None, None, None),
            EngineSpec::BltS { window } => (None, Some(window), None),
            EngineSpec::BltD { block_size, unmasking } | EngineSpec::BltDv { block_size, unmasking } => {
                (Some(block_size), None, Some(unmasking))
            }
        };
        Ok(Run {
            session,
            prompt_len: prompt.len(),
            trace: DecodeTrace {
                engine: spec.name().to_string(),
                block_size,
                window,
                unmasking,
                seed: opts.seed,
                ..Default::default()
            },
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
        })
    }

    fn generated(&self) -> &[Symbol] {
        &self.session.symbols()[self.prompt_len..]
    }

    fn done(&self, length: usize) -> bool {
        self.generated().len() >= length || self.generated().contains(&EOS)
    }

    fn encode(&mut self, include_open: bool) -> Result<()> {
        self.trace.encoder_global_nfes += 1;
        self.session.encode(include_open)
    }

    fn decode(&mut self, block: &[Symbol], mode: Assign, from: usize) -> Result<super::DecodeOut> {
        self.trace.decoder_nfes += 1;
        self.session.decode(block, mode, from)
    }

    fn finish(mut self, length: usize) -> Generation {
        let output: Vec<u8> = self
            .generated()
            .iter()
            .take(length)
            .take_while(|&&s| s != EOS)
            .map(|&s| s as u8)
            .collect();
        self.trace.output = output.clone();
        Generation {
            output,
            trace: self.trace,
        }
    }

    fn ar(&mut self, length: usize) -> Result<()> {
        self.encode(false)?;
        while self.generated().len() < length {
            let from = self.session.len() - 1;
            let out = self.decode(&[], Assign::Causal, from)?;
            let y = greedy(&out.prefix[0]);
            if y == EOS {
                break;
            }
            self.session.push(&[y])?;
            if self.session.segmentation().is_closed() {
                self.encode(false)?;
            }
        }
        Ok(())
    }

    /// Denoises one block of `block_size` masks appended after the current
    /// sequence. Returns the clean block and the number of steps taken.
    fn denoise(&mut self, block_size: usize, cfg: &UnmaskingConfig, mode: Assign) -> Result<(Vec<Symbol>, usize)> {
        let n = self.session.len();
        let mut block = vec![MASK; block_size];
        let mut steps = 0;
        loop {
            let masked: Vec<usize> = (0..block_size).filter(|&j| block[j] == MASK).collect();
            if masked.is_empty() {
                break;
            }
            let out = self.decode(&block, mode, n)?;
            steps += 1;
            let dists: Vec<Vec<Real>> = masked
                .iter()
                .map(|&j| emittable_distribution(&out.block[j], cfg.temperature))
                .collect();
            let chosen = match cfg.strategy {
                Strategy::Confidence => select_unmask_confidence(&dists, cfg.alpha),
                Strategy::EntropyBounded => select_unmask_eb(&dists, cfg.gamma, cfg.top_p),
                Strategy::OneStep => (0..masked.len()).collect(),
            };
            for c in chosen {
                let j = masked[c];
                block[j] = if cfg.is_sampled() {
                    let d = match cfg.top_p {
                        Some(p) => top_p_truncate(&dists[c], p),
                        None => dists[c].clone(),
                    };
                    sample(&d, &mut self.rng)
                } else {
                    greedy(&out.block[j])
                };
            }
        }
        Ok((block, steps))
    }

    fn blt_d(&mut self, length: usize, block_size: usize, cfg: &UnmaskingConfig) -> Result<()> {
        self.encode(true)?;
        while !self.done(length) {
            let (block, steps) = self.denoise(block_size, cfg, Assign::Block)?;
            self.trace.block_steps.push(steps);
            self.session.push(&block)?;
            self.encode(true)?;
        }
        Ok(())
    }

    /// Drafts `window` bytes with the decoder alone, one call per byte.
    fn draft_ar(&mut self, window: usize) -> Result<Vec<Symbol>> {
        let base = self.session.len();
        for _ in 0..window {
            let from = self.session.len() - 1;
            let out = self.decode(&[], Assign::Draft, from)?;
            let y = greedy(&out.prefix[0]);
            self.session.push(&[y])?;
        }
        Ok(self.session.symbols()[base..].to_vec())
    }

    fn draft_diffusion(&mut self, block_size: usize, cfg: &UnmaskingConfig) -> Result<Vec<Symbol>> {
        let (block, steps) = self.denoise(block_size, cfg, Assign::Draft)?;
        self.trace.block_steps.push(steps);
        self.session.push(&block)?;
        Ok(block)
    }

    /// Draft-then-verify cycles. `draft` appends its draft to the session and
    /// returns it.
    fn speculative(&mut self, length: usize, mut draft: impl FnMut(&mut Self) -> Result<Vec<Symbol>>) -> Result<()> {
        self.encode(false)?;
        while !self.done(length) {
            let base = self.session.len();
            let d = draft(self)?;
            self.encode(false)?;
            let out = self.decode(&[], Assign::Causal, base - 1)?;
            let predictions: Vec<Symbol> = out.prefix.iter().map(|r| greedy(r)).collect();
            let advance = verify_draft(&predictions, &d)?;
            let accepted = advance.len() - 1;
            self.trace.drafted += d.len();
            self.trace.accepted += accepted;
            self.session.truncate(base + accepted);
            self.session.push(&advance[accepted..])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{thread_forward_counts, ModelConfig};
    use crate::patching::EntropyModel;
    use crate::vocab::with_bos;

    fn setup(seed: u64) -> (HierarchicalModel, Patcher) {
        let cfg = ModelConfig {
            d_local: 8,
            d_global: 16,
            l_enc: 1,
            l_glob: 1,
            l_dec: 2,
            heads_enc: 2,
            heads_glob: 2,
            heads_dec: 2,
            ffn_mult: 2,
            ..ModelConfig::default()
        };
        let model = HierarchicalModel::new(cfg, seed).unwrap();
        let em = EntropyModel::fit_bytes(b"abracadabra alakazam abracadabra", 2, 0.3).unwrap();
        (model, Patcher::new(em, 2.5, 4).unwrap())
    }

    /// A patcher that never fires on entropy, so patches are exactly `max` long.
    fn constant_patcher(max: usize) -> Patcher {
        let em = EntropyModel::fit_bytes(b"xyz", 0, 1.0).unwrap();
        Patcher::new(em, 1e9, max).unwrap()
    }

    #[test]
    fn ar_counts_decoder_calls_and_boundaries() {
        let (model, _) = setup(1);
        let patcher = constant_patcher(4);
        let g = generate_ar(&model, &patcher, &with_bos(b""), 1).unwrap();
        assert_eq!(g.trace.decoder_nfes, 1);
        let g = generate_ar(&model, &patcher, &with_bos(b""), 16).unwrap();
        if g.output.len() == 16 {
            assert_eq!(g.trace.decoder_nfes, 16);
            // first byte opens a patch, then every 4 bytes closes one
            assert_eq!(g.trace.encoder_global_nfes, 1 + 4);
        }
    }

    #[test]
    fn speculative_engines_match_autoregressive() {
        for seed in 0..3 {
            let (model, patcher) = setup(seed);
            let prompt = with_bos(b"abra");
            let ar = generate_ar(&model, &patcher, &prompt, 24).unwrap();
            for k in [1, 3, 8] {
                let s = generate_blt_s(&model, &patcher, &prompt, 24, k).unwrap();
                assert_eq!(s.output, ar.output, "seed {seed} k {k}");
                assert!(s.trace.accepted <= s.trace.drafted);
            }
            for (b, cfg) in [
                (1, UnmaskingConfig::one_step()),
                (4, UnmaskingConfig::confidence(0.7)),
                (6, UnmaskingConfig::entropy_bounded(1.0)),
            ] {
                let d = generate_blt_dv(&model, &patcher, &prompt, 24, b, &cfg).unwrap();
                assert_eq!(d.output, ar.output, "seed {seed} B {b}");
            }
        }
    }

    #[test]
    fn caching_is_transparent() {
        let (model, patcher) = setup(4);
        let prompt = with_bos(b"alakazam");
        for spec in [
            EngineSpec::Ar,
            EngineSpec::BltS { window: 4 },
            EngineSpec::BltD {
                block_size: 4,
                unmasking: UnmaskingConfig::confidence(0.3),
            },
            EngineSpec::BltDv {
                block_size: 5,
                unmasking: UnmaskingConfig::entropy_bounded(0.5),
            },
        ] {
            let a = generate(&model, &patcher, &prompt, 20, &spec, &RunOptions { seed: 3, caching: true }).unwrap();
            let b = generate(&model, &patcher, &prompt, 20, &spec, &RunOptions { seed: 3, caching: false }).unwrap();
            assert_eq!(a, b, "{}", spec.name());
        }
    }

    #[test]
    fn block_step_bounds_and_hook_counts() {
        let (model, patcher) = setup(5);
        let prompt = with_bos(b"ab");
        let before = thread_forward_counts();
        let one = generate_blt_d(&model, &patcher, &prompt, 10, 4, &UnmaskingConfig::one_step(), 0).unwrap();
        let after = thread_forward_counts();
        assert_eq!(after.2 - before.2, one.trace.decoder_nfes);
        assert_eq!(after.0 - before.0, one.trace.encoder_global_nfes);
        assert_eq!(after.1 - before.1, one.trace.encoder_global_nfes);
        let blocks = one.trace.block_steps.len();
        assert_eq!(one.trace.decoder_nfes, blocks);
        assert_eq!(one.trace.encoder_global_nfes, blocks + 1);
        let slow = generate_blt_d(&model, &patcher, &prompt, 10, 4, &UnmaskingConfig::one_per_step(), 0).unwrap();
        assert!(slow.trace.block_steps.iter().all(|&s| s == 4));
        let mut eb = UnmaskingConfig::entropy_bounded(2.0);
        eb.top_p = Some(0.9);
        eb.temperature = 1.0;
        for seed in 0..4 {
            let g = generate_blt_d(&model, &patcher, &prompt, 12, 4, &eb, seed).unwrap();
            assert!(g.trace.block_steps.iter().all(|&s| (1..=4).contains(&s)));
            let again = generate_blt_d(&model, &patcher, &prompt, 12, 4, &eb, seed).unwrap();
            assert_eq!(g, again);
        }
    }

    #[test]
    fn stepwise_matches_batch_scoring() {
        let (model, patcher) = setup(6);
        let x = with_bos(b"abracadabra");
        let step = stepwise_logprob(&model, &patcher, &x).unwrap();
        let seg = patcher.segment(&x).unwrap();
        let mut s = Session::new(&model, &patcher, &x, false).unwrap();
        s.encode(false).unwrap();
        let out = s.decode(&[], Assign::Causal, 0).unwrap();
        let batch: Real = (1..x.len())
            .map(|i| out.prefix[i - 1][x[i] as usize] - logsumexp(&out.prefix[i - 1]))
            .sum();
        assert!((step - batch).abs() < 1e-9, "{step} vs {batch}");
        assert!(seg.num_patches() > 1);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let (model, patcher) = setup(0);
        let p = with_bos(b"a");
        assert!(generate_blt_s(&model, &patcher, &p, 4, 0).is_err());
        assert!(generate_blt_d(&model, &patcher, &p, 4, 0, &UnmaskingConfig::one_step(), 0).is_err());
        let mut sampled = UnmaskingConfig::entropy_bounded(1.0);
        sampled.temperature = 1.0;
        assert!(generate_blt_dv(&model, &patcher, &p, 4, 4, &sampled).is_err());
        assert!(generate_ar(&model, &patcher, &[], 4).is_err());
    }
}

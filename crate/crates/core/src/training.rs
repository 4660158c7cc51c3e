//! Optimizer, learning-rate schedule and the training loop.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::diffusion::{combined_loss_graph, corrupt, sample_timestep, BlockPlan};
use crate::error::{Error, Result};
use crate::model::HierarchicalModel;
use crate::patching::{read_f64, read_u32, read_u64, EntropyModel, Patcher};
use crate::tensor::{Real, Tensor};
use crate::vocab::{with_bos, Symbol};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Bytes consumed per step; the batch holds `batch_bytes / window` examples.
    pub batch_bytes: usize,
    /// Bytes per example, before BOS is prepended.
    pub window: usize,
    pub peak_lr: Real,
    pub warmup: usize,
    pub weight_decay: Real,
    pub clip: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub block_size: usize,
    /// Weight of the masked objective in the total loss.
    pub mask_weight: Real,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_bytes: 4096,
            window: 256,
            peak_lr: 3e-3,
            warmup: 100,
            weight_decay: 0.1,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            block_size: 8,
            mask_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.warmup > self.steps {
            return bad("warmup exceeds steps");
        }
        if !(self.clip > 0.0) {
            return bad("clip norm must be positive");
        }
        if self.window == 0 || self.block_size == 0 || self.batch_bytes == 0 {
            return bad("window, block_size and batch_bytes must be positive");
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.mask_weight >= 0.0) {
            return bad("learning rate, weight decay and mask weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn examples_per_step(&self) -> usize {
        (self.batch_bytes / self.window).max(1)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("steps", self.steps.to_string()),
            ("batch_bytes", self.batch_bytes.to_string()),
            ("example_len", self.window.to_string()),
            ("peak_lr", format!("{:?}", self.peak_lr as f64)),
            ("warmup", self.warmup.to_string()),
            ("weight_decay", format!("{:?}", self.weight_decay as f64)),
            ("clip", format!("{:?}", self.clip as f64)),
            ("beta1", format!("{:?}", self.beta1 as f64)),
            ("beta2", format!("{:?}", self.beta2 as f64)),
            ("eps", format!("{:?}", self.eps as f64)),
            ("block_size", self.block_size.to_string()),
            ("mask_weight", format!("{:?}", self.mask_weight as f64)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key = value` setting. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::InvalidArgument(format!("{key}: expected an integer, got `{v}`")))
        };
        let real = |v: &str| {
            v.parse::<f64>()
                .map(|x| x as Real)
                .map_err(|_| Error::InvalidArgument(format!("{key}: expected a number, got `{v}`")))
        };
        match key {
            "steps" => self.steps = int(value)? as usize,
            "batch_bytes" => self.batch_bytes = int(value)? as usize,
            "example_len" => self.window = int(value)? as usize,
            "peak_lr" => self.peak_lr = real(value)?,
            "warmup" => self.warmup = int(value)? as usize,
            "weight_decay" => self.weight_decay = real(value)?,
            "clip" => self.clip = real(value)?,
            "beta1" => self.beta1 = real(value)?,
            "beta2" => self.beta2 = real(value)?,
            "eps" => self.eps = real(value)?,
            "block_size" => self.block_size = int(value)? as usize,
            "mask_weight" => self.mask_weight = real(value)?,
            "seed" => self.seed = int(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `cfg.steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Real {
    let step = step.min(cfg.steps);
    if step < cfg.warmup {
        return cfg.peak_lr * step as Real / cfg.warmup as Real;
    }
    let span = cfg.steps - cfg.warmup;
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = (step - cfg.warmup) as Real / span as Real;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI as Real * progress).cos())
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<Real>], max_norm: Real) -> Real {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<Real>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One AdamW update after global-norm clipping. Weight decay is decoupled and
/// skips one-dimensional tensors (normalization gains).
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &mut [Vec<Real>],
    state: &mut AdamState,
    lr: Real,
    cfg: &TrainConfig,
) -> Result<Real> {
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: format!("tensor {i}"),
            });
        }
    }
    let norm = clip_global_norm(grads, cfg.clip);
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        let decay = if p.shape().len() > 1 { cfg.weight_decay } else { 0.0 };
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *w);
        }
    }
    Ok(norm)
}

/// Losses of one step, averaged over the batch and normalized per predicted byte.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_clean: Real,
    pub l_mask: Real,
    pub l_total: Real,
    pub lr: Real,
}

pub const LOSS_CSV_HEADER: &str = "step,l_clean,l_mask,l_total,lr";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.8}",
            self.step, self.l_clean, self.l_mask, self.l_total, self.lr
        )
    }
}

/// Fits the n-gram entropy model on `corpus` and calibrates the threshold for
/// the target mean patch length on windows of the corpus.
pub fn build_patcher(
    corpus: &[u8],
    order: usize,
    smoothing: Real,
    target_patch: Real,
    max_patch: usize,
    window: usize,
) -> Result<Patcher> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let model = EntropyModel::fit_bytes(corpus, order, smoothing)?;
    let w = window.max(2);
    let step = (corpus.len() / 64).max(w);
    let sample: Vec<Vec<Symbol>> = (0..corpus.len())
        .step_by(step)
        .map(|s| with_bos(&corpus[s..(s + w).min(corpus.len())]))
        .collect();
    let (threshold, _) = Patcher::calibrate(&model, &sample, target_patch, max_patch)?;
    Patcher::new(model, threshold, max_patch)
}

pub struct Trainer<'a> {
    pub model: HierarchicalModel,
    pub patcher: &'a Patcher,
    corpus: &'a [u8],
    pub cfg: TrainConfig,
    pub opt: AdamState,
    /// Updates applied so far.
    pub step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: HierarchicalModel, patcher: &'a Patcher, corpus: &'a [u8], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let opt = AdamState::new(model.tensors());
        Ok(Trainer {
            model,
            patcher,
            corpus,
            cfg,
            opt,
            step: 0,
        })
    }

    /// The BOS-prefixed window and rng for example `idx` of update `step`.
    fn example(&self, step: usize, idx: usize) -> (Vec<Symbol>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((step as u64) << 20) | idx as u64);
        let w = self.cfg.window.min(self.corpus.len());
        let offset = rng.random_range(0..=self.corpus.len() - w);
        (with_bos(&self.corpus[offset..offset + w]), rng)
    }

    /// Mean per-byte losses and parameter gradients of the batch for update `step`.
    fn batch_gradients(&self, step: usize) -> Result<(Real, Real, Real, Vec<Vec<Real>>)> {
        let n_ex = self.cfg.examples_per_step();
        let mut grads: Vec<Vec<Real>> = self.model.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let (mut lc, mut lm, mut lt) = (0.0, 0.0, 0.0);
        for idx in 0..n_ex {
            let (x, mut rng) = self.example(step, idx);
            let seg = self.patcher.segment(&x)?;
            let plan = BlockPlan::build(&x, &seg, self.cfg.block_size)?;
            let t = sample_timestep(&mut rng);
            let corrupted = corrupt(&plan, t, &mut rng)?;
            let mut g = Graph::new();
            let b = self.model.bind(&mut g, true);
            let l = combined_loss_graph(&self.model, &mut g, &b, &x, &seg, &plan, &corrupted, self.cfg.mask_weight)?;
            let norm = 1.0 / ((x.len() - 1) as Real * n_ex as Real);
            let total = g.scale(l.total, norm);
            let value = g.value(total)[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: format!("loss {value}"),
                });
            }
            let gr = g.backward(total)?;
            for (acc, &v) in grads.iter_mut().zip(&b.vars) {
                if let Some(d) = gr.get(v) {
                    for (a, x) in acc.iter_mut().zip(d) {
                        *a += x;
                    }
                }
            }
            lc += g.value(l.clean)[0] * norm;
            lm += g.value(l.mask)[0] * norm;
            lt += value;
        }
        Ok((lc, lm, lt, grads))
    }

    /// Runs one update. On divergence the parameters are left untouched.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let step = self.step + 1;
        let (l_clean, l_mask, l_total, mut grads) = self.batch_gradients(step)?;
        let lr = lr_at(step, &self.cfg);
        let mut params = self.model.tensors().to_vec();
        let mut opt = self.opt.clone();
        adamw_step(&mut params, &mut grads, &mut opt, lr, &self.cfg).map_err(|e| Error::Divergence {
            step,
            reason: e.to_string(),
        })?;
        if params.iter().any(|p| p.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite parameters after update".into(),
            });
        }
        let values: Vec<Vec<Real>> = params.into_iter().map(Tensor::into_data).collect();
        self.model.load_values(&values)?;
        self.opt = opt;
        self.step = step;
        Ok(LossRecord {
            step,
            l_clean,
            l_mask,
            l_total,
            lr,
        })
    }

    /// Trains until `cfg.steps` updates have been applied.
    pub fn run(&mut self, mut observe: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut records = Vec::new();
        while self.step < self.cfg.steps {
            let r = self.train_step()?;
            observe(&r);
            records.push(r);
        }
        Ok(records)
    }

    /// Losses at the current parameters for the batch of update `step`,
    /// without changing anything.
    pub fn evaluate(&self, step: usize) -> Result<(Real, Real, Real)> {
        let (c, m, t, _) = self.batch_gradients(step)?;
        Ok((c, m, t))
    }

    /// Writes full-precision parameters, optimizer moments and the step count.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(STATE_MAGIC)?;
        w.write_all(&STATE_VERSION.to_le_bytes())?;
        w.write_all(&(self.step as u64).to_le_bytes())?;
        w.write_all(&self.opt.t.to_le_bytes())?;
        w.write_all(&(self.model.num_tensors() as u32).to_le_bytes())?;
        for (i, t) in self.model.tensors().iter().enumerate() {
            w.write_all(&(t.numel() as u64).to_le_bytes())?;
            for src in [t.data(), &self.opt.m[i], &self.opt.v[i]] {
                for &x in src {
                    w.write_all(&(x as f64).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Restores a state written by [`Self::save_state`] for the same model shape.
    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Format("missing training-state magic".into()));
        }
        if read_u32(&mut r)? != STATE_VERSION {
            return Err(Error::Format("unsupported training-state version".into()));
        }
        let step = read_u64(&mut r)? as usize;
        let t = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        if n != self.model.num_tensors() {
            return Err(Error::Format(format!("{n} tensors in state, model has {}", self.model.num_tensors())));
        }
        let mut values = Vec::with_capacity(n);
        let mut opt = AdamState::new(self.model.tensors());
        opt.t = t;
        for i in 0..n {
            let numel = read_u64(&mut r)? as usize;
            if numel != self.model.tensor(i).numel() {
                return Err(Error::Format(format!("tensor {i} has {numel} values in state")));
            }
            let mut read_vec = || (0..numel).map(|_| read_f64(&mut r).map(|x| x as Real)).collect::<Result<Vec<_>>>();
            values.push(read_vec()?);
            opt.m[i] = read_vec()?;
            opt.v[i] = read_vec()?;
        }
        self.model.load_values(&values)?;
        self.opt = opt;
        self.step = step;
        Ok(())
    }
}

const STATE_MAGIC: &[u8; 4] = b"BLTS";
const STATE_VERSION: u32 = 1;

/// Trains a copy of `model` and returns it with the loss curve.
pub fn train(
    model: HierarchicalModel,
    patcher: &Patcher,
    corpus: &[u8],
    cfg: TrainConfig,
) -> Result<(HierarchicalModel, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(model, patcher, corpus, cfg)?;
    let records = trainer.run(|_| {})?;
    Ok((trainer.model, records))
}

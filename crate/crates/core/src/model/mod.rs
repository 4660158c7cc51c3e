//! The hierarchical network: local encoder, global latent transformer and local
//! decoder, plus the attention masks that wire them together.

pub mod checkpoint;
mod forward;
pub mod masks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vocab::VOCAB_SIZE;

pub use forward::{thread_forward_counts, Bound, ForwardCounters, KvCache, LayerKv};
pub use masks::{build_inference_masks, build_training_masks, AttentionMaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_local: usize,
    pub d_global: usize,
    pub l_enc: usize,
    pub l_glob: usize,
    pub l_dec: usize,
    pub heads_enc: usize,
    pub heads_glob: usize,
    pub heads_dec: usize,
    /// Feed-forward hidden width as a multiple of the layer width.
    pub ffn_mult: usize,
    pub rope_theta: Real,
    /// Self-attention window of the encoder and global model.
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_local: 64,
            d_global: 128,
            l_enc: 1,
            l_glob: 2,
            l_dec: 2,
            heads_enc: 4,
            heads_glob: 4,
            heads_dec: 4,
            ffn_mult: 4,
            rope_theta: 500000.0,
            window: 512,
        }
    }
}

impl ModelConfig {
    /// Number of `d_local` slices each latent splits into for cross-attention.
    pub fn latent_split(&self) -> usize {
        self.d_global / self.d_local
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_local == 0 || self.d_global == 0 {
            return bad("widths must be positive".into());
        }
        if !self.d_global.is_multiple_of(self.d_local) {
            return bad(format!(
                "d_global {} is not a multiple of d_local {}",
                self.d_global, self.d_local
            ));
        }
        for (name, d, h) in [
            ("encoder", self.d_local, self.heads_enc),
            ("global", self.d_global, self.heads_glob),
            ("decoder", self.d_local, self.heads_dec),
        ] {
            if h == 0 || d % h != 0 || (d / h) % 2 != 0 {
                return bad(format!(
                    "{name} width {d} must split into {h} heads of even size"
                ));
            }
        }
        if self.ffn_mult == 0 || self.window == 0 || !(self.rope_theta > 0.0) {
            return bad("ffn_mult, window and rope_theta must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("d_local", self.d_local.to_string()),
            ("d_global", self.d_global.to_string()),
            ("l_enc", self.l_enc.to_string()),
            ("l_glob", self.l_glob.to_string()),
            ("l_dec", self.l_dec.to_string()),
            ("heads_enc", self.heads_enc.to_string()),
            ("heads_glob", self.heads_glob.to_string()),
            ("heads_dec", self.heads_dec.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("rope_theta", format!("{:?}", self.rope_theta as f64)),
            ("window", self.window.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key = value` setting. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("{key}: expected an integer, got `{v}`")))
        };
        match key {
            "d_local" => self.d_local = parse_usize(value)?,
            "d_global" => self.d_global = parse_usize(value)?,
            "l_enc" => self.l_enc = parse_usize(value)?,
            "l_glob" => self.l_glob = parse_usize(value)?,
            "l_dec" => self.l_dec = parse_usize(value)?,
            "heads_enc" => self.heads_enc = parse_usize(value)?,
            "heads_glob" => self.heads_glob = parse_usize(value)?,
            "heads_dec" => self.heads_dec = parse_usize(value)?,
            "ffn_mult" => self.ffn_mult = parse_usize(value)?,
            "window" => self.window = parse_usize(value)?,
            "rope_theta" => {
                self.rope_theta = value
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("{key}: expected a number, got `{value}`")))?
                    as Real
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Format(format!("unknown model config key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Encoder,
    Global,
    Decoder,
}

/// Indices into the parameter store for one pre-norm transformer layer.
#[derive(Debug, Clone)]
pub struct LayerIds {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Debug, Clone)]
pub struct CrossIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub embed: usize,
    pub layers: Vec<LayerIds>,
    pub proj: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub embed: usize,
    /// Linear map applied to each latent before splitting into slices.
    pub split: usize,
    pub cross: Vec<CrossIds>,
    pub layers: Vec<LayerIds>,
    pub final_norm: usize,
    pub head: usize,
}

/// Model parameters in declaration order. Weight matrices are stored as
/// `[in, out]` so a layer computes `x · W`.
#[derive(Debug, Clone)]
pub struct HierarchicalModel {
    pub config: ModelConfig,
    names: Vec<String>,
    components: Vec<Component>,
    tensors: Vec<Tensor>,
    pub encoder: EncoderIds,
    pub global: Vec<LayerIds>,
    pub decoder: DecoderIds,
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub global: usize,
    pub decoder: usize,
}

struct Builder {
    names: Vec<String>,
    components: Vec<Component>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, comp: Component, shape: Vec<usize>, std: Option<Real>) -> usize {
        let numel: usize = shape.iter().product();
        let data = match std {
            Some(s) => {
                let normal = Normal::new(0.0f64, s as f64).expect("finite std");
                (0..numel).map(|_| normal.sample(&mut self.rng) as Real).collect()
            }
            None => vec![1.0; numel],
        };
        self.names.push(name);
        self.components.push(comp);
        self.tensors.push(Tensor::new(shape, data).expect("shape matches"));
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: String, comp: Component, din: usize, dout: usize) -> usize {
        self.add(name, comp, vec![din, dout], Some(1.0 / (din as Real).sqrt()))
    }

    fn layer(&mut self, prefix: &str, comp: Component, d: usize, ffn_mult: usize) -> LayerIds {
        let h = d * ffn_mult;
        LayerIds {
            attn_norm: self.add(format!("{prefix}.attn_norm"), comp, vec![d], None),
            wq: self.linear(format!("{prefix}.wq"), comp, d, d),
            wk: self.linear(format!("{prefix}.wk"), comp, d, d),
            wv: self.linear(format!("{prefix}.wv"), comp, d, d),
            wo: self.linear(format!("{prefix}.wo"), comp, d, d),
            ffn_norm: self.add(format!("{prefix}.ffn_norm"), comp, vec![d], None),
            w_gate: self.linear(format!("{prefix}.w_gate"), comp, d, h),
            w_up: self.linear(format!("{prefix}.w_up"), comp, d, h),
            w_down: self.linear(format!("{prefix}.w_down"), comp, h, d),
        }
    }
}

impl HierarchicalModel {
    /// Randomly initialized model. Weights are drawn from N(0, 1/fan_in),
    /// embeddings from N(0, 1), norm gains start at 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            components: Vec::new(),
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (dl, dg, fm) = (config.d_local, config.d_global, config.ffn_mult);
        let enc = Component::Encoder;
        let encoder = EncoderIds {
            embed: b.add("encoder.embed".into(), enc, vec![VOCAB_SIZE, dl], Some(1.0)),
            layers: (0..config.l_enc)
                .map(|i| b.layer(&format!("encoder.layers.{i}"), enc, dl, fm))
                .collect(),
            proj: b.linear("encoder.proj".into(), enc, dl, dg),
        };
        let global = (0..config.l_glob)
            .map(|i| b.layer(&format!("global.layers.{i}"), Component::Global, dg, fm))
            .collect();
        let dec = Component::Decoder;
        let u = config.latent_split();
        let embed = b.add("decoder.embed".into(), dec, vec![VOCAB_SIZE, dl], Some(1.0));
        let split = b.linear("decoder.split".into(), dec, dg, u * dl);
        let mut cross = Vec::new();
        let mut layers = Vec::new();
        for i in 0..config.l_dec {
            let p = format!("decoder.cross.{i}");
            cross.push(CrossIds {
                wq: b.linear(format!("{p}.wq"), dec, dl, dl),
                wk: b.linear(format!("{p}.wk"), dec, dl, dl),
                wv: b.linear(format!("{p}.wv"), dec, dl, dl),
                wo: b.linear(format!("{p}.wo"), dec, dl, dl),
            });
            layers.push(b.layer(&format!("decoder.layers.{i}"), dec, dl, fm));
        }
        let decoder = DecoderIds {
            embed,
            split,
            cross,
            layers,
            final_norm: b.add("decoder.final_norm".into(), dec, vec![dl], None),
            head: b.linear("decoder.head".into(), dec, dl, VOCAB_SIZE),
        };
        Ok(HierarchicalModel {
            config,
            names: b.names,
            components: b.components,
            tensors: b.tensors,
            encoder,
            global,
            decoder,
        })
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn component(&self, id: usize) -> Component {
        self.components[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts {
            encoder: 0,
            global: 0,
            decoder: 0,
        };
        for (t, comp) in self.tensors.iter().zip(&self.components) {
            match comp {
                Component::Encoder => c.encoder += t.numel(),
                Component::Global => c.global += t.numel(),
                Component::Decoder => c.decoder += t.numel(),
            }
        }
        c
    }

    /// Replaces every parameter value, keeping shapes.
    pub fn load_values(&mut self, values: &[Vec<Real>]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} tensors for a model with {}",
                values.len(),
                self.tensors.len()
            )));
        }
        for ((t, v), name) in self.tensors.iter_mut().zip(values).zip(&self.names) {
            if t.numel() != v.len() {
                return Err(Error::Shape(format!("{name}: {} values for {}", v.len(), t.numel())));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
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
        }
    }

    #[test]
    fn param_counts_match_brute_force() {
        let cfg = tiny();
        let m = HierarchicalModel::new(cfg.clone(), 1).unwrap();
        let c = m.param_counts();
        let (dl, dg, v) = (8, 16, VOCAB_SIZE);
        let layer = |d: usize| 2 * d + 4 * d * d + 3 * d * d * 2;
        assert_eq!(c.encoder, v * dl + layer(dl) + dl * dg);
        assert_eq!(c.global, layer(dg));
        assert_eq!(c.decoder, v * dl + dg * dg + 2 * (4 * dl * dl + layer(dl)) + dl + dl * v);
        let total: usize = m.tensors().iter().map(|t| t.numel()).sum();
        assert_eq!(total, c.encoder + c.global + c.decoder);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.d_global = 12;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.heads_dec = 3;
        assert!(c.validate().is_err());
        let c = tiny();
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn init_is_seeded() {
        let a = HierarchicalModel::new(tiny(), 3).unwrap();
        let b = HierarchicalModel::new(tiny(), 3).unwrap();
        let c = HierarchicalModel::new(tiny(), 4).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert_ne!(a.tensors(), c.tensors());
    }
}

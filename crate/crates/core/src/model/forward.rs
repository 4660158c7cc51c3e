//! Forward computation on a [`Graph`]. The same functions serve training (full
//! sequences, gradients recorded) and incremental inference (new rows only,
//! keys and values of earlier rows supplied from a cache).

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::patching::PatchSegmentation;
use crate::tensor::{Mask, Real, Tensor};
use crate::vocab::{Symbol, VOCAB_SIZE};

use super::masks::AttentionMaskSpec;
use super::{CrossIds, HierarchicalModel, LayerIds};

/// Model parameters registered in one graph, indexed like the parameter store.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn v(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// Rotated keys and values of already-computed rows for one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv {
    pub k: Vec<Real>,
    pub v: Vec<Real>,
}

/// Per-layer key/value rows of a growing sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub width: usize,
}

impl KvCache {
    pub fn new(layers: usize, width: usize) -> Self {
        KvCache {
            layers: vec![LayerKv::default(); layers],
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.layers
            .first()
            .map_or(0, |l| l.k.len() / self.width.max(1))
    }

    pub fn truncate(&mut self, rows: usize) {
        for l in &mut self.layers {
            l.k.truncate(rows * self.width);
            l.v.truncate(rows * self.width);
        }
    }

    /// Appends the first `rows` rows of freshly computed keys and values.
    pub fn append(&mut self, g: &Graph, kv: &[(Var, Var)], rows: usize) {
        let n = rows * self.width;
        for (l, &(k, v)) in self.layers.iter_mut().zip(kv) {
            l.k.extend_from_slice(&g.value(k)[..n]);
            l.v.extend_from_slice(&g.value(v)[..n]);
        }
    }
}

/// Counts every component invocation, independently of engine bookkeeping.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    pub encoder: AtomicUsize,
    pub global: AtomicUsize,
    pub decoder: AtomicUsize,
}

impl ForwardCounters {
    pub fn snapshot(&self) -> (usize, usize, usize) {
        (
            self.encoder.load(Ordering::Relaxed),
            self.global.load(Ordering::Relaxed),
            self.decoder.load(Ordering::Relaxed),
        )
    }
}

pub(crate) fn counters() -> &'static ForwardCounters {
    static COUNTERS: ForwardCounters = ForwardCounters {
        encoder: AtomicUsize::new(0),
        global: AtomicUsize::new(0),
        decoder: AtomicUsize::new(0),
    };
    &COUNTERS
}

thread_local! {
    static LOCAL: std::cell::Cell<(usize, usize, usize)> = const { std::cell::Cell::new((0, 0, 0)) };
}

fn bump(which: usize) {
    let c = counters();
    [&c.encoder, &c.global, &c.decoder][which].fetch_add(1, Ordering::Relaxed);
    LOCAL.with(|l| {
        let mut v = l.get();
        match which {
            0 => v.0 += 1,
            1 => v.1 += 1,
            _ => v.2 += 1,
        }
        l.set(v);
    });
}

/// Component invocations `(encoder, global, decoder)` made on the current
/// thread since it started.
pub fn thread_forward_counts() -> (usize, usize, usize) {
    LOCAL.with(|l| l.get())
}

pub(crate) fn symbols_to_ids(x: &[Symbol]) -> Result<Vec<usize>> {
    x.iter()
        .enumerate()
        .map(|(position, &s)| {
            if (s as usize) < VOCAB_SIZE {
                Ok(s as usize)
            } else {
                Err(Error::TargetOutOfRange {
                    position,
                    target: s as usize,
                    vocab: VOCAB_SIZE,
                })
            }
        })
        .collect()
}

/// Causal mask with a sliding window for `new` rows starting at absolute row
/// `past`, over `past + new` key columns.
fn windowed_causal(past: usize, new: usize, window: usize) -> Mask {
    Mask::from_fn(new, past + new, |r, j| {
        let i = past + r;
        j <= i && i - j < window
    })
}

impl HierarchicalModel {
    /// Registers every parameter in `g`.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> Bound {
        let vars = self
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        Bound { vars }
    }

    /// Pre-norm self-attention plus SwiGLU block. Returns the output rows and
    /// this call's rotated keys and values.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        b: &Bound,
        l: &LayerIds,
        heads: usize,
        x: Var,
        positions: &[usize],
        mask: &Mask,
        past: Option<&LayerKv>,
    ) -> Result<(Var, (Var, Var))> {
        let d = g.shape(x).1;
        let hd = d / heads;
        let theta = self.config.rope_theta;
        let h = g.rmsnorm(x, b.v(l.attn_norm))?;
        let q = g.matmul(h, b.v(l.wq))?;
        let q = g.rope(q, positions, hd, theta)?;
        let k = g.matmul(h, b.v(l.wk))?;
        let k = g.rope(k, positions, hd, theta)?;
        let v = g.matmul(h, b.v(l.wv))?;
        let (k_all, v_all) = match past {
            Some(p) if !p.k.is_empty() => {
                let rows = p.k.len() / d;
                let pk = g.leaf(rows, d, p.k.clone(), false)?;
                let pv = g.leaf(rows, d, p.v.clone(), false)?;
                (g.concat_rows(pk, k)?, g.concat_rows(pv, v)?)
            }
            _ => (k, v),
        };
        let a = g.attention(q, k_all, v_all, heads, mask)?;
        let a = g.matmul(a, b.v(l.wo))?;
        let x = g.add(x, a)?;
        let h = g.rmsnorm(x, b.v(l.ffn_norm))?;
        let gate = g.matmul(h, b.v(l.w_gate))?;
        let gate = g.silu(gate);
        let up = g.matmul(h, b.v(l.w_up))?;
        let f = g.mul(gate, up)?;
        let f = g.matmul(f, b.v(l.w_down))?;
        Ok((g.add(x, f)?, (k, v)))
    }

    /// Encoder byte states for `ids` occupying rows `past..past+len`.
    pub fn encoder_hidden(
        &self,
        g: &mut Graph,
        b: &Bound,
        ids: &[usize],
        cache: Option<&KvCache>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        bump(0);
        let past = cache.map_or(0, |c| c.rows());
        let mut x = g.embedding(b.v(self.encoder.embed), ids)?;
        let positions: Vec<usize> = (past..past + ids.len()).collect();
        let mask = windowed_causal(past, ids.len(), self.config.window);
        let mut kv = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            let p = cache.map(|c| &c.layers[i]);
            let (out, lkv) = self.block(g, b, l, self.config.heads_enc, x, &positions, &mask, p)?;
            x = out;
            kv.push(lkv);
        }
        Ok((x, kv))
    }

    /// Mean-pools encoder states over each `(start, len)` span and projects to
    /// the global width.
    pub fn pool_patches(&self, g: &mut Graph, b: &Bound, hidden: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let pooled = g.segment_mean(hidden, spans)?;
        g.matmul(pooled, b.v(self.encoder.proj))
    }

    /// Global model over latent rows `past..past+len`, rotary positions are
    /// patch indices.
    pub fn global_hidden(
        &self,
        g: &mut Graph,
        b: &Bound,
        t: Var,
        cache: Option<&KvCache>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        bump(1);
        let past = cache.map_or(0, |c| c.rows());
        let n = g.shape(t).0;
        let positions: Vec<usize> = (past..past + n).collect();
        let mask = windowed_causal(past, n, self.config.window);
        let mut x = t;
        let mut kv = Vec::new();
        for (i, l) in self.global.iter().enumerate() {
            let p = cache.map(|c| &c.layers[i]);
            let (out, lkv) = self.block(g, b, l, self.config.heads_glob, x, &positions, &mask, p)?;
            x = out;
            kv.push(lkv);
        }
        Ok((x, kv))
    }

    /// Cross-attention keys and values per decoder layer for latent rows `o`:
    /// each latent is mapped to `U·d_local` and split into `U` rows.
    pub fn cross_kv(&self, g: &mut Graph, b: &Bound, o: Var) -> Result<Vec<(Var, Var)>> {
        let m = g.shape(o).0;
        let u = self.config.latent_split();
        let c = g.matmul(o, b.v(self.decoder.split))?;
        let c = g.reshape(c, m * u, self.config.d_local)?;
        self.decoder
            .cross
            .iter()
            .map(|cl| Ok((g.matmul(c, b.v(cl.wk))?, g.matmul(c, b.v(cl.wv))?)))
            .collect()
    }

    fn cross_attend(
        &self,
        g: &mut Graph,
        b: &Bound,
        cl: &CrossIds,
        x: Var,
        kv: (Var, Var),
        mask: &Mask,
    ) -> Result<Var> {
        let q = g.matmul(x, b.v(cl.wq))?;
        let a = g.attention(q, kv.0, kv.1, self.config.heads_dec, mask)?;
        let a = g.matmul(a, b.v(cl.wo))?;
        g.add(x, a)
    }

    /// Decoder logits for `ids`. `self_mask` spans the cached rows plus these;
    /// `cross` comes from [`Self::cross_kv`]. Returns logits and this call's
    /// self-attention keys and values.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_hidden(
        &self,
        g: &mut Graph,
        b: &Bound,
        ids: &[usize],
        positions: &[usize],
        self_mask: &Mask,
        cross_assign: &[usize],
        cross: &[(Var, Var)],
        cache: Option<&KvCache>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        bump(2);
        let n = ids.len();
        let u = self.config.latent_split();
        if positions.len() != n || cross_assign.len() != n {
            return Err(Error::Shape(format!(
                "{n} decoder rows with {} positions and {} assignments",
                positions.len(),
                cross_assign.len()
            )));
        }
        let latents = cross.first().map_or(0, |kv| g.shape(kv.0).0 / u);
        if let Some(&index) = cross_assign.iter().find(|&&a| a >= latents) {
            return Err(Error::LatentOutOfRange { index, latents });
        }
        let x = g.embedding(b.v(self.decoder.embed), ids)?;
        self.decoder_from_embedded(g, b, x, positions, self_mask, cross_assign, cross, cache)
    }

    /// The decoder after its embedding lookup, for callers that need the
    /// input embedding node itself.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_from_embedded(
        &self,
        g: &mut Graph,
        b: &Bound,
        mut x: Var,
        positions: &[usize],
        self_mask: &Mask,
        cross_assign: &[usize],
        cross: &[(Var, Var)],
        cache: Option<&KvCache>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let n = g.shape(x).0;
        let u = self.config.latent_split();
        let latents = cross.first().map_or(0, |kv| g.shape(kv.0).0 / u);
        let cross_mask = Mask::from_fn(n, latents * u, |i, j| j / u == cross_assign[i]);
        let mut kv = Vec::new();
        for (i, (cl, l)) in self.decoder.cross.iter().zip(&self.decoder.layers).enumerate() {
            x = self.cross_attend(g, b, cl, x, cross[i], &cross_mask)?;
            let p = cache.map(|c| &c.layers[i]);
            let (out, lkv) = self.block(g, b, l, self.config.heads_dec, x, positions, self_mask, p)?;
            x = out;
            kv.push(lkv);
        }
        let h = g.rmsnorm(x, b.v(self.decoder.final_norm))?;
        Ok((g.matmul(h, b.v(self.decoder.head))?, kv))
    }

    /// Latent tokens `T` for `x` under `seg`, one row per patch.
    pub fn encode(&self, x: &[Symbol], seg: &PatchSegmentation) -> Result<Tensor> {
        if seg.len() != x.len() {
            return Err(Error::Segmentation(format!(
                "segmentation of {} positions for {} symbols",
                seg.len(),
                x.len()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (h, _) = self.encoder_hidden(&mut g, &b, &symbols_to_ids(x)?, None)?;
        let t = self.pool_patches(&mut g, &b, h, &seg.spans())?;
        Ok(g.to_tensor(t))
    }

    /// Global outputs `O` for latent tokens `T`.
    pub fn global_forward(&self, t: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let tv = g.tensor(t);
        let (o, _) = self.global_hidden(&mut g, &b, tv, None)?;
        Ok(g.to_tensor(o))
    }

    /// `D_C`: the latent row mapped to `U·d_local` and split into `U` slices.
    pub fn split_latent(&self, o: &[Real]) -> Result<Vec<Vec<Real>>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let ov = g.leaf(1, o.len(), o.to_vec(), false)?;
        let c = g.matmul(ov, b.v(self.decoder.split))?;
        Ok(g.value(c).chunks(self.config.d_local).map(|c| c.to_vec()).collect())
    }

    /// Decoder logits for `input` (one row per position) against global
    /// outputs `o` under `masks`.
    pub fn decoder_logits(&self, input: &[Symbol], o: &Tensor, masks: &AttentionMaskSpec) -> Result<Tensor> {
        if masks.len() != input.len() {
            return Err(Error::Shape(format!(
                "masks for {} rows, input has {}",
                masks.len(),
                input.len()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let ov = g.tensor(o);
        let cross = self.cross_kv(&mut g, &b, ov)?;
        let (logits, _) = self.decoder_hidden(
            &mut g,
            &b,
            &symbols_to_ids(input)?,
            &masks.positions,
            &masks.self_mask,
            &masks.cross_assign,
            &cross,
            None,
        )?;
        Ok(g.to_tensor(logits))
    }

    /// Full forward for training: encoder and global model over the clean
    /// sequence `x`, decoder over `decoder_input` (clean rows followed by any
    /// block rows) under `masks`. Returns the logits node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: &[Symbol],
        seg: &PatchSegmentation,
        decoder_input: &[Symbol],
        masks: &AttentionMaskSpec,
    ) -> Result<Var> {
        Ok(self.forward_graph_parts(g, b, x, seg, decoder_input, masks)?.0)
    }

    /// [`Self::forward_graph`] also returning the decoder input embedding node.
    pub fn forward_graph_parts(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: &[Symbol],
        seg: &PatchSegmentation,
        decoder_input: &[Symbol],
        masks: &AttentionMaskSpec,
    ) -> Result<(Var, Var)> {
        let ids = symbols_to_ids(x)?;
        let (h, _) = self.encoder_hidden(g, b, &ids, None)?;
        let t = self.pool_patches(g, b, h, &seg.spans())?;
        let (o, _) = self.global_hidden(g, b, t, None)?;
        let cross = self.cross_kv(g, b, o)?;
        let dec_ids = symbols_to_ids(decoder_input)?;
        if masks.len() != dec_ids.len() {
            return Err(Error::Shape(format!(
                "masks for {} rows, decoder input has {}",
                masks.len(),
                dec_ids.len()
            )));
        }
        let u = self.config.latent_split();
        let latents = cross.first().map_or(0, |kv| g.shape(kv.0).0 / u);
        if let Some(&index) = masks.cross_assign.iter().find(|&&a| a >= latents) {
            return Err(Error::LatentOutOfRange { index, latents });
        }
        bump(2);
        let emb = g.embedding(b.v(self.decoder.embed), &dec_ids)?;
        let (logits, _) = self.decoder_from_embedded(
            g,
            b,
            emb,
            &masks.positions,
            &masks.self_mask,
            &masks.cross_assign,
            &cross,
            None,
        )?;
        Ok((logits, emb))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_inference_masks, ModelConfig};
    use super::*;
    use crate::vocab::with_bos;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            d_local: 8,
            d_global: 16,
            l_enc: 1,
            l_glob: 1,
            l_dec: 1,
            heads_enc: 2,
            heads_glob: 2,
            heads_dec: 2,
            ffn_mult: 2,
            ..ModelConfig::default()
        }
    }

    fn seg(starts: Vec<usize>, n: usize) -> PatchSegmentation {
        PatchSegmentation::from_starts(starts, n, false).unwrap()
    }

    #[test]
    fn encode_shape_and_causality() {
        let m = HierarchicalModel::new(tiny(), 1).unwrap();
        let x = with_bos(b"abcdefgh");
        let s = seg(vec![0, 1, 4, 6], 9);
        let t = m.encode(&x, &s).unwrap();
        assert_eq!(t.shape(), &[4, 16]);
        let mut y = x.clone();
        y[7] = b'z' as Symbol;
        y[8] = b'q' as Symbol;
        let t2 = m.encode(&y, &s).unwrap();
        assert_eq!(&t.data()[..3 * 16], &t2.data()[..3 * 16]);
        assert_ne!(t.row(3), t2.row(3));
    }

    #[test]
    fn global_is_causal_and_zero_layers_is_identity() {
        let m = HierarchicalModel::new(tiny(), 2).unwrap();
        let t = Tensor::matrix(3, 16, (0..48).map(|i| (i as Real * 0.1).cos()).collect()).unwrap();
        let o = m.global_forward(&t).unwrap();
        assert_eq!(o.shape(), &[3, 16]);
        let mut t2 = t.clone();
        t2.data_mut()[40] += 1.0;
        let o2 = m.global_forward(&t2).unwrap();
        assert_eq!(&o.data()[..32], &o2.data()[..32]);
        let m0 = HierarchicalModel::new(ModelConfig { l_glob: 0, ..tiny() }, 2).unwrap();
        assert_eq!(m0.global_forward(&t).unwrap(), t);
    }

    #[test]
    fn split_latent_identity_halves() {
        let cfg = ModelConfig {
            d_local: 2,
            d_global: 4,
            heads_enc: 1,
            heads_glob: 1,
            heads_dec: 1,
            ..tiny()
        };
        let mut m = HierarchicalModel::new(cfg, 0).unwrap();
        let id = m.decoder.split;
        let eye: Vec<Real> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        m.tensors_mut()[id].data_mut().copy_from_slice(&eye);
        let s = m.split_latent(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn logits_shape_and_block_invariance() {
        let m = HierarchicalModel::new(tiny(), 3).unwrap();
        let x = with_bos(b"hello");
        let s = seg(vec![0, 1, 3], 6);
        let o = m.global_forward(&m.encode(&x, &s).unwrap()).unwrap();
        let spec0 = build_inference_masks(6, 0, &s).unwrap();
        let a = m.decoder_logits(&x, &o, &spec0).unwrap();
        assert_eq!(a.shape(), &[6, VOCAB_SIZE]);
        let spec4 = build_inference_masks(6, 4, &s).unwrap();
        let mut input = x.clone();
        input.extend([crate::vocab::MASK; 4]);
        let b = m.decoder_logits(&input, &o, &spec4).unwrap();
        // the last prefix row switches latent when a block follows; all others match
        assert_eq!(&a.data()[..5 * VOCAB_SIZE], &b.data()[..5 * VOCAB_SIZE]);
    }

    #[test]
    fn perturbing_last_latent_only_moves_its_rows() {
        let m = HierarchicalModel::new(tiny(), 4).unwrap();
        let x = with_bos(b"abcdef");
        let s = seg(vec![0, 1, 3, 5], 7);
        let o = m.global_forward(&m.encode(&x, &s).unwrap()).unwrap();
        let spec = build_inference_masks(7, 3, &s).unwrap();
        let mut input = x.clone();
        input.extend([crate::vocab::MASK; 3]);
        let a = m.decoder_logits(&input, &o, &spec).unwrap();
        let mut o2 = o.clone();
        o2.data_mut()[3 * 16] += 0.5;
        let b = m.decoder_logits(&input, &o2, &spec).unwrap();
        for i in 0..10 {
            let same = a.row(i) == b.row(i);
            let uses_last = spec.cross_assign[..=i].contains(&3) && (i >= 7 || spec.cross_assign[i] == 3);
            if spec.cross_assign[..=i].iter().all(|&c| c != 3) {
                assert!(same, "row {i}");
            } else if uses_last {
                assert!(!same, "row {i}");
            }
        }
    }

    #[test]
    fn out_of_range_assignment_is_rejected() {
        let m = HierarchicalModel::new(tiny(), 5).unwrap();
        let x = with_bos(b"ab");
        let s = seg(vec![0, 1], 3);
        let o = m.global_forward(&m.encode(&x, &s).unwrap()).unwrap();
        let mut spec = build_inference_masks(3, 0, &s).unwrap();
        spec.cross_assign[2] = 5;
        assert!(matches!(
            m.decoder_logits(&x, &o, &spec),
            Err(Error::LatentOutOfRange { index: 5, latents: 2 })
        ));
    }
}

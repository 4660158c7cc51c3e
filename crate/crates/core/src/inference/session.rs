//! Incremental evaluation state for one generation.
//!
//! Complete patches have fixed boundaries (the patcher is causal), so their
//! latents, the global keys/values behind them and every decoder row whose
//! cross-attention target is such a latent can be kept across steps. Only the
//! growing last patch and rows that read it are recomputed. Because every kernel
//! is row-local, cached values equal a full recomputation bit-for-bit.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{HierarchicalModel, KvCache, LayerKv};
use crate::patching::{PatchSegmentation, Patcher};
use crate::tensor::{Mask, Real};
use crate::vocab::{Symbol, BOS};

/// Which latent each decoder row reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assign {
    /// Every row uses its causal latent: the previous patch's, or its own when
    /// it is the final byte of a complete patch. All needed latents must exist.
    Causal,
    /// Causal, except the last prefix row and all block rows read the last
    /// latent, which may belong to an incomplete patch.
    Block,
    /// Causal where the latent exists, otherwise the last available latent.
    /// Block rows read the last available latent.
    Draft,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub encoder_rows: usize,
    pub latents_computed: usize,
    pub decoder_rows: usize,
}

#[derive(Debug, Clone)]
struct Latent {
    start: usize,
    len: usize,
    complete: bool,
    o: Vec<Real>,
    /// Cross-attention keys/values per decoder layer, `U` rows each.
    cross: Vec<LayerKv>,
}

/// Logits from one decoder call.
#[derive(Debug, Clone)]
pub struct DecodeOut {
    /// Rows `from..n` of the prefix, as requested.
    pub prefix: Vec<Vec<Real>>,
    pub block: Vec<Vec<Real>>,
}

pub struct Session<'m> {
    model: &'m HierarchicalModel,
    patcher: &'m Patcher,
    caching: bool,
    x: Vec<Symbol>,
    seg: PatchSegmentation,
    enc_cache: KvCache,
    enc_hidden: Vec<Real>,
    latents: Vec<Latent>,
    glob_cache: KvCache,
    dec_cache: KvCache,
    stats: SessionStats,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m HierarchicalModel, patcher: &'m Patcher, prompt: &[Symbol], caching: bool) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if prompt[0] != BOS {
            return Err(Error::InvalidArgument("prompt must begin with BOS".into()));
        }
        let cfg = &model.config;
        Ok(Session {
            model,
            patcher,
            caching,
            x: prompt.to_vec(),
            seg: patcher.segment(prompt)?,
            enc_cache: KvCache::new(cfg.l_enc, cfg.d_local),
            enc_hidden: Vec::new(),
            latents: Vec::new(),
            glob_cache: KvCache::new(cfg.l_glob, cfg.d_global),
            dec_cache: KvCache::new(cfg.l_dec, cfg.d_local),
            stats: SessionStats::default(),
        })
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn segmentation(&self) -> &PatchSegmentation {
        &self.seg
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    /// Decoder rows whose keys and values are cached.
    pub fn committed_rows(&self) -> usize {
        self.dec_cache.rows()
    }

    /// Global outputs of the latents currently held, one row each.
    pub fn latent_rows(&self) -> Vec<&[Real]> {
        self.latents.iter().map(|l| l.o.as_slice()).collect()
    }

    pub fn push(&mut self, symbols: &[Symbol]) -> Result<()> {
        self.x.extend_from_slice(symbols);
        self.patcher.extend(&mut self.seg, &self.x)?;
        debug_assert_eq!(self.seg, self.patcher.segment(&self.x)?, "incremental re-patching diverged");
        self.retain_valid();
        Ok(())
    }

    /// Drops everything past the first `n` symbols.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.x.len() {
            return;
        }
        let n = n.max(1);
        self.x.truncate(n);
        self.seg = self.seg.truncated(n, self.patcher, &self.x);
        let dl = self.model.config.d_local;
        self.enc_hidden.truncate(n * dl);
        self.enc_cache.truncate(n);
        let committed = self.dec_cache.rows().min(n);
        self.dec_cache.truncate(committed);
        self.retain_valid();
    }

    /// Keeps the longest run of held latents that still match the current
    /// segmentation, and the global cache rows behind them.
    fn retain_valid(&mut self) {
        let seg = &self.seg;
        let keep = self
            .latents
            .iter()
            .enumerate()
            .take_while(|(m, l)| {
                *m < seg.num_patches()
                    && l.start == seg.starts()[*m]
                    && l.len == seg.patch_len(*m)
                    && l.complete == (*m + 1 < seg.num_patches() || seg.is_closed())
            })
            .count();
        self.latents.truncate(keep);
        let complete = self.latents.iter().take_while(|l| l.complete).count();
        self.glob_cache.truncate(complete);
        if self.dec_cache.rows() > 0 {
            // Committed rows only read complete latents; drop any whose latent left.
            let rows = self.dec_cache.rows();
            let ok = (0..rows)
                .take_while(|&i| self.causal_latent(i) < complete)
                .count();
            self.dec_cache.truncate(ok);
        }
    }

    fn reset(&mut self) {
        self.enc_cache.truncate(0);
        self.enc_hidden.clear();
        self.latents.clear();
        self.glob_cache.truncate(0);
        self.dec_cache.truncate(0);
    }

    /// The latent a row reads under causal assignment.
    pub fn causal_latent(&self, i: usize) -> usize {
        let p = self.seg.patch_of(i);
        if self.seg.is_patch_final(i) {
            p
        } else {
            p - 1
        }
    }

    /// One encoder and one global-model invocation over the current sequence.
    /// Brings latents up to date for every complete patch and, with
    /// `include_open`, for the incomplete last patch too.
    pub fn encode(&mut self, include_open: bool) -> Result<()> {
        if !self.caching {
            self.reset();
        }
        let model = self.model;
        let cfg = &model.config;
        let (dl, dg, u) = (cfg.d_local, cfg.d_global, cfg.latent_split());
        let n = self.x.len();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);

        let done = self.enc_hidden.len() / dl;
        let ids: Vec<usize> = self.x[done..].iter().map(|&s| s as usize).collect();
        let (h, kv) = model.encoder_hidden(&mut g, &b, &ids, Some(&self.enc_cache))?;
        self.enc_cache.append(&g, &kv, n - done);
        self.enc_hidden.extend_from_slice(g.value(h));
        self.stats.encoder_rows += n - done;

        let target = if include_open {
            self.seg.num_patches()
        } else {
            self.seg.complete_patches()
        };
        let first = self.latents.len().min(target);
        let spans: Vec<(usize, usize)> = self.seg.spans()[first..target].to_vec();
        let base = spans.first().map_or(0, |s| s.0);
        let rows = spans.last().map_or(0, |s| s.0 + s.1) - base;
        let hidden: Var = g.leaf(rows, dl, self.enc_hidden[base * dl..(base + rows) * dl].to_vec(), false)?;
        let local: Vec<(usize, usize)> = spans.iter().map(|&(s, l)| (s - base, l)).collect();
        let t = model.pool_patches(&mut g, &b, hidden, &local)?;
        let complete_before = self.glob_cache.rows();
        if complete_before != first {
            return Err(Error::Segmentation(format!(
                "global cache holds {complete_before} rows for {first} latents"
            )));
        }
        let (o, gkv) = model.global_hidden(&mut g, &b, t, Some(&self.glob_cache))?;
        let new = spans.len();
        let closed = self.seg.is_closed();
        let last = self.seg.num_patches() - 1;
        let n_complete = (first..target).filter(|&m| m < last || closed).count();
        self.glob_cache.append(&g, &gkv, n_complete);
        let cross = model.cross_kv(&mut g, &b, o)?;
        let ov = g.value(o);
        for j in 0..new {
            let m = first + j;
            let lat = Latent {
                start: spans[j].0,
                len: spans[j].1,
                complete: m < last || closed,
                o: ov[j * dg..(j + 1) * dg].to_vec(),
                cross: cross
                    .iter()
                    .map(|&(k, v)| LayerKv {
                        k: g.value(k)[j * u * dl..(j + 1) * u * dl].to_vec(),
                        v: g.value(v)[j * u * dl..(j + 1) * u * dl].to_vec(),
                    })
                    .collect(),
            };
            self.latents.push(lat);
        }
        self.stats.latents_computed += new;
        Ok(())
    }

    /// One decoder invocation over the uncached prefix rows plus `block`.
    /// Returns logits for prefix rows `from..n` and every block row.
    pub fn decode(&mut self, block: &[Symbol], mode: Assign, from: usize) -> Result<DecodeOut> {
        if !self.caching {
            self.dec_cache.truncate(0);
        }
        let n = self.x.len();
        if from > n {
            return Err(Error::InvalidArgument(format!("rows from {from} requested of {n}")));
        }
        if from < self.dec_cache.rows() {
            self.dec_cache.truncate(from);
        }
        let start = self.dec_cache.rows();
        let avail = self.latents.len();
        if avail == 0 {
            return Err(Error::InvalidArgument("decode before any latent was computed".into()));
        }
        let last_patch = self.seg.num_patches() - 1;
        let bl = block.len();
        let mut assign = Vec::with_capacity(n - start + bl);
        let mut commit = 0;
        let mut committing = true;
        for i in start..n {
            let perm = self.causal_latent(i);
            let a = match mode {
                Assign::Block if i + 1 == n && bl > 0 => last_patch,
                Assign::Draft if perm >= avail => avail - 1,
                _ => perm,
            };
            if a >= avail {
                return Err(Error::LatentOutOfRange { index: a, latents: avail });
            }
            if committing && a == perm && self.latents[a].complete {
                commit += 1;
            } else {
                committing = false;
            }
            assign.push(a);
        }
        let block_latent = match mode {
            Assign::Block => last_patch,
            Assign::Draft => avail - 1,
            Assign::Causal if bl == 0 => 0,
            Assign::Causal => {
                return Err(Error::InvalidArgument("causal decoding takes no block".into()));
            }
        };
        if bl > 0 && block_latent >= avail {
            return Err(Error::LatentOutOfRange { index: block_latent, latents: avail });
        }
        assign.extend(std::iter::repeat_n(block_latent, bl));

        let rows = n - start + bl;
        let mut ids: Vec<usize> = self.x[start..].iter().map(|&s| s as usize).collect();
        ids.extend(block.iter().map(|&s| s as usize));
        let positions: Vec<usize> = (start..n + bl).collect();
        let mask = Mask::from_fn(rows, n + bl, |r, j| {
            let i = start + r;
            i >= n || j <= i
        });

        let model = self.model;
        let (dl, u) = (model.config.d_local, model.config.latent_split());
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let mut cross = Vec::with_capacity(model.config.l_dec);
        for l in 0..model.config.l_dec {
            let mut k = Vec::with_capacity(avail * u * dl);
            let mut v = Vec::with_capacity(avail * u * dl);
            for lat in &self.latents {
                k.extend_from_slice(&lat.cross[l].k);
                v.extend_from_slice(&lat.cross[l].v);
            }
            cross.push((g.leaf(avail * u, dl, k, false)?, g.leaf(avail * u, dl, v, false)?));
        }
        let (logits, kv) = model.decoder_hidden(
            &mut g,
            &b,
            &ids,
            &positions,
            &mask,
            &assign,
            &cross,
            Some(&self.dec_cache),
        )?;
        self.dec_cache.append(&g, &kv, commit);
        self.stats.decoder_rows += rows;

        let lv = g.value(logits);
        let width = lv.len() / rows.max(1);
        let row = |r: usize| lv[r * width..(r + 1) * width].to_vec();
        Ok(DecodeOut {
            prefix: (from..n).map(|i| row(i - start)).collect(),
            block: (0..bl).map(|j| row(n - start + j)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_inference_masks, ModelConfig};
    use crate::patching::EntropyModel;
    use crate::vocab::{with_bos, MASK};

    pub(crate) fn setup() -> (HierarchicalModel, Patcher) {
        let cfg = ModelConfig {
            d_local: 8,
            d_global: 16,
            l_enc: 1,
            l_glob: 2,
            l_dec: 2,
            heads_enc: 2,
            heads_glob: 2,
            heads_dec: 2,
            ffn_mult: 2,
            ..ModelConfig::default()
        };
        let model = HierarchicalModel::new(cfg, 11).unwrap();
        let em = EntropyModel::fit_bytes(b"the cat sat on the mat. the dog sat on the log.", 2, 0.5).unwrap();
        let (thr, _) = Patcher::calibrate(&em, &[with_bos(b"the cat sat on the mat and the dog")], 3.0, 8).unwrap();
        (model, Patcher::new(em, thr, 8).unwrap())
    }

    #[test]
    fn causal_logits_match_full_recomputation() {
        let (model, patcher) = setup();
        let x = with_bos(b"the dog sat on");
        let seg = patcher.segment(&x).unwrap();
        let complete = seg.complete_patches();
        let t = model.encode(&x, &seg).unwrap();
        let o = model.global_forward(&t).unwrap();
        let spec = build_inference_masks(x.len(), 0, &seg).unwrap();
        let mut o_used = o.clone();
        if complete < seg.num_patches() {
            // causal rows never read the incomplete last latent
            o_used = crate::tensor::Tensor::matrix(complete, 16, o.data()[..complete * 16].to_vec()).unwrap();
        }
        let full = model.decoder_logits(&x, &o_used, &spec).unwrap();

        let mut s = Session::new(&model, &patcher, &x[..3], true).unwrap();
        s.encode(false).unwrap();
        s.decode(&[], Assign::Causal, 2).unwrap();
        s.push(&x[3..9]).unwrap();
        s.encode(false).unwrap();
        s.decode(&[], Assign::Causal, 8).unwrap();
        s.push(&x[9..]).unwrap();
        s.encode(false).unwrap();
        let out = s.decode(&[], Assign::Causal, 0).unwrap();
        for i in 0..x.len() {
            assert_eq!(out.prefix[i].as_slice(), full.row(i), "row {i}");
        }
    }

    #[test]
    fn block_logits_match_full_recomputation_and_cache_is_transparent() {
        let (model, patcher) = setup();
        let x = with_bos(b"the cat sa");
        let seg = patcher.segment(&x).unwrap();
        let o = model.global_forward(&model.encode(&x, &seg).unwrap()).unwrap();
        let spec = build_inference_masks(x.len(), 4, &seg).unwrap();
        let mut input = x.clone();
        input.extend([MASK, b'x' as Symbol, MASK, MASK]);
        let full = model.decoder_logits(&input, &o, &spec).unwrap();
        for caching in [true, false] {
            let mut s = Session::new(&model, &patcher, &x[..4], caching).unwrap();
            s.encode(true).unwrap();
            s.decode(&[MASK; 4], Assign::Block, 4).unwrap();
            s.push(&x[4..]).unwrap();
            s.encode(true).unwrap();
            let out = s.decode(&input[x.len()..], Assign::Block, 0).unwrap();
            for i in 0..input.len() {
                let got = if i < x.len() { &out.prefix[i] } else { &out.block[i - x.len()] };
                assert_eq!(got.as_slice(), full.row(i), "row {i} caching {caching}");
            }
        }
    }

    #[test]
    fn truncation_and_rollback_reproduce_fresh_state() {
        let (model, patcher) = setup();
        let x = with_bos(b"on the mat the");
        let mut a = Session::new(&model, &patcher, &x, true).unwrap();
        a.encode(false).unwrap();
        a.decode(&[], Assign::Causal, 0).unwrap();
        a.push(&with_bos(b"zzqq")[1..]).unwrap();
        a.encode(true).unwrap();
        a.decode(&[], Assign::Draft, 0).unwrap();
        a.truncate(x.len());
        a.encode(false).unwrap();
        let ra = a.decode(&[], Assign::Causal, 0).unwrap();
        let mut b = Session::new(&model, &patcher, &x, false).unwrap();
        b.encode(false).unwrap();
        let rb = b.decode(&[], Assign::Causal, 0).unwrap();
        assert_eq!(ra.prefix, rb.prefix);
        assert_eq!(a.segmentation(), b.segmentation());
    }

    #[test]
    fn growing_patch_recomputes_only_its_latent() {
        let (model, patcher) = setup();
        let x = with_bos(b"the cat sat on the mat");
        let mut s = Session::new(&model, &patcher, &x, true).unwrap();
        s.encode(true).unwrap();
        let m = s.segmentation().num_patches();
        assert_eq!(s.stats().latents_computed, m);
        // find a byte that keeps the last patch open
        let mut grown = None;
        for c in b"abcdefghijklmnopqrstuvwxyz ." {
            let mut y = x.clone();
            y.push(*c as Symbol);
            let seg = patcher.segment(&y).unwrap();
            if seg.num_patches() == m && !s.segmentation().is_closed() {
                grown = Some(*c as Symbol);
                break;
            }
        }
        if let Some(c) = grown {
            s.push(&[c]).unwrap();
            s.encode(true).unwrap();
            assert_eq!(s.stats().latents_computed, m + 1);
        }
        let mut fresh = Session::new(&model, &patcher, &x, false).unwrap();
        fresh.encode(true).unwrap();
        fresh.encode(true).unwrap();
        assert_eq!(fresh.stats().latents_computed, 2 * m);
    }

    #[test]
    fn rejects_bad_prompts() {
        let (model, patcher) = setup();
        assert!(Session::new(&model, &patcher, &[], true).is_err());
        assert!(Session::new(&model, &patcher, &[b'a' as Symbol], true).is_err());
    }
}

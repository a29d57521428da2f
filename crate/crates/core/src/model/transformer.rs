//! Pre-norm transformer encoder-decoder over packed (unpadded) token rows,
//! with hand-written backward passes.

use rand_chacha::ChaCha8Rng;

use super::ops::{self, AttentionCache, LayerNormCache, Segment};
use super::params::{FeedForward, Parameters};
use super::{Batch, ModelConfig};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::text::Lang;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// One decoder input row-run.
#[derive(Debug, Clone, Copy)]
pub struct DecoderInput<'a> {
    pub ids: &'a [usize],
    /// Index into the encoder segments this sequence attends to.
    pub source: usize,
    pub lang: Lang,
    pub pos_offset: usize,
}

struct FfnCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn ffn_fwd(p: &FeedForward, x: &[f64], n: usize) -> (Vec<f64>, FfnCache) {
    let pre = ops::linear_fwd(&p.up, x, n);
    let act: Vec<f64> = pre.iter().map(|&v| ops::gelu(v)).collect();
    let y = ops::linear_fwd(&p.down, &act, n);
    (
        y,
        FfnCache {
            x: x.to_vec(),
            pre,
            act,
        },
    )
}

fn ffn_bwd(p: &FeedForward, g: &mut FeedForward, c: &FfnCache, dy: &[f64], n: usize) -> Vec<f64> {
    let mut dact = ops::linear_bwd(&p.down, &mut g.down, &c.act, dy, n);
    for (da, &z) in dact.iter_mut().zip(&c.pre) {
        *da *= ops::gelu_grad(z);
    }
    ops::linear_bwd(&p.up, &mut g.up, &c.x, &dact, n)
}

struct EncLayerCache {
    ln_attn: LayerNormCache,
    attn: AttentionCache,
    drop_attn: Option<Vec<f64>>,
    ln_ffn: LayerNormCache,
    ffn: FfnCache,
    drop_ffn: Option<Vec<f64>>,
}

struct DecLayerCache {
    ln_self: LayerNormCache,
    self_attn: AttentionCache,
    drop_self: Option<Vec<f64>>,
    ln_cross: LayerNormCache,
    cross_attn: AttentionCache,
    drop_cross: Option<Vec<f64>>,
    ln_ffn: LayerNormCache,
    ffn: FfnCache,
    drop_ffn: Option<Vec<f64>>,
}

pub struct EncoderOutput {
    /// `n_src x d` final (normalized) encoder states.
    pub states: Vec<f64>,
    /// `(start, len)` row range of each source sentence.
    pub segments: Vec<(usize, usize)>,
    ids: Vec<usize>,
    drop_embed: Option<Vec<f64>>,
    layers: Vec<EncLayerCache>,
    final_ln: LayerNormCache,
}

pub struct DecoderOutput {
    /// `n_tgt x d` final (normalized) decoder states.
    pub states: Vec<f64>,
    pub segments: Vec<(usize, usize)>,
    ids: Vec<usize>,
    langs: Vec<Lang>,
    drop_embed: Option<Vec<f64>>,
    self_segs: Vec<Segment>,
    cross_segs: Vec<Segment>,
    layers: Vec<DecLayerCache>,
    final_ln: LayerNormCache,
}

/// Teacher-forced logits, packed: row `offsets[b] + t` holds target
/// position `t` of sentence `b`.
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub vocab: usize,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl ForwardOutput {
    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        assert!(t < self.lengths[b]);
        let r = self.offsets[b] + t;
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn rows(&self) -> usize {
        self.logits.len() / self.vocab
    }
}

fn check_finite(x: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn maybe_mask(len: usize, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
    match rng {
        Some(r) if p > 0.0 => Some(ops::dropout_mask(len, p, *r)),
        _ => None,
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub struct Transformer<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a Parameters,
}

impl<'a> Transformer<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a Parameters) -> Self {
        Self { config, params }
    }

    fn d(&self) -> usize {
        self.config.dim
    }

    fn projection(&self) -> &'a [f64] {
        match &self.params.output {
            Some(o) => &o.data,
            None => &self.params.embedding.data,
        }
    }

    /// Token embedding (scaled by `sqrt(d)`) plus sinusoidal position, plus
    /// the decoder language code when enabled. Encoder input never carries
    /// a language code.
    pub fn embed(&self, ids: &[usize], side: Side, lang: Lang, pos_offset: usize) -> Result<Vec<f64>> {
        let d = self.d();
        if ids.len() + pos_offset > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len() + pos_offset,
                max_len: self.config.max_len,
            });
        }
        let vocab = self.params.vocab_size();
        let scale = (d as f64).sqrt();
        let mut out = vec![0.0; ids.len() * d];
        let use_lang = side == Side::Decoder && self.config.use_decoder_lang_code;
        let code = &self.params.lang_codes.data[lang.index() * d..(lang.index() + 1) * d];
        for (t, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { index: id, size: vocab });
            }
            let row = &mut out[t * d..(t + 1) * d];
            ops::positional_encoding(t + pos_offset, d, row);
            let e = &self.params.embedding.data[id * d..(id + 1) * d];
            for c in 0..d {
                row[c] += scale * e[c];
                if use_lang {
                    row[c] += scale * code[c];
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, sources: &[&[usize]], mut rng: Option<&mut ChaCha8Rng>) -> Result<EncoderOutput> {
        let d = self.d();
        let heads = self.config.heads;
        let p_drop = self.config.dropout;
        let mut segments = Vec::with_capacity(sources.len());
        let mut ids = Vec::new();
        let mut x = Vec::new();
        for src in sources {
            if src.is_empty() {
                return Err(Error::invalid("empty source sequence"));
            }
            segments.push((ids.len(), src.len()));
            ids.extend_from_slice(src);
            x.extend(self.embed(src, Side::Encoder, Lang::Src, 0)?);
        }
        let n = ids.len();
        let drop_embed = maybe_mask(x.len(), p_drop, &mut rng);
        ops::apply_mask(&mut x, drop_embed.as_ref());
        let segs: Vec<Segment> = segments
            .iter()
            .map(|&(s, l)| Segment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect();

        let mut layers = Vec::with_capacity(self.params.encoder.len());
        for (li, layer) in self.params.encoder.iter().enumerate() {
            let (a, ln_attn) = ops::layer_norm_fwd(&layer.ln_attn, &x, d);
            let (mut att, attn) = ops::attention_fwd(&layer.self_attn, &a, &a, &segs, heads, false, d);
            let drop_attn = maybe_mask(att.len(), p_drop, &mut rng);
            ops::apply_mask(&mut att, drop_attn.as_ref());
            add_into(&mut x, &att);
            let (b, ln_ffn) = ops::layer_norm_fwd(&layer.ln_ffn, &x, d);
            let (mut f, ffn) = ffn_fwd(&layer.ffn, &b, n);
            let drop_ffn = maybe_mask(f.len(), p_drop, &mut rng);
            ops::apply_mask(&mut f, drop_ffn.as_ref());
            add_into(&mut x, &f);
            check_finite(&x, || format!("encoder layer {li}"))?;
            layers.push(EncLayerCache {
                ln_attn,
                attn,
                drop_attn,
                ln_ffn,
                ffn,
                drop_ffn,
            });
        }
        let (states, final_ln) = ops::layer_norm_fwd(&self.params.enc_norm, &x, d);
        Ok(EncoderOutput {
            states,
            segments,
            ids,
            drop_embed,
            layers,
            final_ln,
        })
    }

    pub fn decode(
        &self,
        enc: &EncoderOutput,
        inputs: &[DecoderInput<'_>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecoderOutput> {
        let d = self.d();
        let heads = self.config.heads;
        let p_drop = self.config.dropout;
        let mut segments = Vec::with_capacity(inputs.len());
        let mut self_segs = Vec::with_capacity(inputs.len());
        let mut cross_segs = Vec::with_capacity(inputs.len());
        let mut ids = Vec::new();
        let mut langs = Vec::new();
        let mut y = Vec::new();
        for inp in inputs {
            if inp.ids.is_empty() {
                return Err(Error::invalid("empty decoder input"));
            }
            let (ks, kl) = *enc
                .segments
                .get(inp.source)
                .ok_or_else(|| Error::invalid("decoder input refers to a missing source"))?;
            let start = ids.len();
            segments.push((start, inp.ids.len()));
            self_segs.push(Segment {
                q_start: start,
                q_len: inp.ids.len(),
                k_start: start,
                k_len: inp.ids.len(),
            });
            cross_segs.push(Segment {
                q_start: start,
                q_len: inp.ids.len(),
                k_start: ks,
                k_len: kl,
            });
            ids.extend_from_slice(inp.ids);
            langs.extend(std::iter::repeat(inp.lang).take(inp.ids.len()));
            y.extend(self.embed(inp.ids, Side::Decoder, inp.lang, inp.pos_offset)?);
        }
        let n = ids.len();
        let drop_embed = maybe_mask(y.len(), p_drop, &mut rng);
        ops::apply_mask(&mut y, drop_embed.as_ref());

        let mut layers = Vec::with_capacity(self.params.decoder.len());
        for (li, layer) in self.params.decoder.iter().enumerate() {
            let (a, ln_self) = ops::layer_norm_fwd(&layer.ln_self, &y, d);
            let (mut sa, self_attn) = ops::attention_fwd(&layer.self_attn, &a, &a, &self_segs, heads, true, d);
            let drop_self = maybe_mask(sa.len(), p_drop, &mut rng);
            ops::apply_mask(&mut sa, drop_self.as_ref());
            add_into(&mut y, &sa);

            let (b, ln_cross) = ops::layer_norm_fwd(&layer.ln_cross, &y, d);
            let (mut ca, cross_attn) =
                ops::attention_fwd(&layer.cross_attn, &b, &enc.states, &cross_segs, heads, false, d);
            let drop_cross = maybe_mask(ca.len(), p_drop, &mut rng);
            ops::apply_mask(&mut ca, drop_cross.as_ref());
            add_into(&mut y, &ca);

            let (c, ln_ffn) = ops::layer_norm_fwd(&layer.ln_ffn, &y, d);
            let (mut f, ffn) = ffn_fwd(&layer.ffn, &c, n);
            let drop_ffn = maybe_mask(f.len(), p_drop, &mut rng);
            ops::apply_mask(&mut f, drop_ffn.as_ref());
            add_into(&mut y, &f);
            check_finite(&y, || format!("decoder layer {li}"))?;
            layers.push(DecLayerCache {
                ln_self,
                self_attn,
                drop_self,
                ln_cross,
                cross_attn,
                drop_cross,
                ln_ffn,
                ffn,
                drop_ffn,
            });
        }
        let (states, final_ln) = ops::layer_norm_fwd(&self.params.dec_norm, &y, d);
        Ok(DecoderOutput {
            states,
            segments,
            ids,
            langs,
            drop_embed,
            self_segs,
            cross_segs,
            layers,
            final_ln,
        })
    }

    /// Logits for the given decoder-state rows.
    pub fn logits_for_rows(&self, states: &[f64], rows: &[usize]) -> Vec<f64> {
        let d = self.d();
        let v = self.params.vocab_size();
        let mut h = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            h.extend_from_slice(&states[r * d..(r + 1) * d]);
        }
        let mut out = vec![0.0; rows.len() * v];
        gemm(rows.len(), d, v, 1.0, &h, false, self.projection(), true, 0.0, &mut out);
        out
    }

    pub fn logits(&self, states: &[f64]) -> Vec<f64> {
        let d = self.d();
        let v = self.params.vocab_size();
        let n = states.len() / d;
        let mut out = vec![0.0; n * v];
        gemm(n, d, v, 1.0, states, false, self.projection(), true, 0.0, &mut out);
        out
    }

    fn run(&self, batch: &Batch, mut rng: Option<&mut ChaCha8Rng>) -> Result<(EncoderOutput, DecoderOutput)> {
        let sources: Vec<&[usize]> = (0..batch.len()).map(|b| batch.src(b)).collect();
        let enc = self.encode(&sources, rng.as_deref_mut())?;
        let inputs: Vec<DecoderInput<'_>> = (0..batch.len())
            .map(|b| DecoderInput {
                ids: batch.tgt_in(b),
                source: b,
                lang: batch.tgt_langs[b],
                pos_offset: batch.tgt_offsets[b],
            })
            .collect();
        let dec = self.decode(&enc, &inputs, rng)?;
        Ok((enc, dec))
    }

    pub fn forward(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOutput> {
        let (_, dec) = self.run(batch, rng)?;
        let logits = self.logits(&dec.states);
        check_finite(&logits, || "output logits".into())?;
        Ok(ForwardOutput {
            logits,
            vocab: self.params.vocab_size(),
            offsets: dec.segments.iter().map(|s| s.0).collect(),
            lengths: dec.segments.iter().map(|s| s.1).collect(),
        })
    }

    /// Mean cross-entropy over all real target tokens and its exact
    /// gradient with respect to every parameter.
    pub fn backward(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Parameters)> {
        let d = self.d();
        let v = self.params.vocab_size();
        let heads = self.config.heads;
        let (enc, dec) = self.run(batch, rng)?;
        let logits = self.logits(&dec.states);
        let targets = batch.packed_targets();
        let (loss, dlogits) = cross_entropy_with_grad(&logits, &targets, v)?;
        let n_t = targets.len();
        let mut g = self.params.zeros_like();

        // output projection
        let mut dh = vec![0.0; n_t * d];
        gemm(n_t, v, d, 1.0, &dlogits, false, self.projection(), false, 0.0, &mut dh);
        let proj_grad = match &mut g.output {
            Some(o) => &mut o.data,
            None => &mut g.embedding.data,
        };
        gemm(v, n_t, d, 1.0, &dlogits, true, &dec.states, false, 1.0, proj_grad);

        // decoder
        let mut dy = ops::layer_norm_bwd(&self.params.dec_norm, &mut g.dec_norm, &dec.final_ln, &dh, d);
        let mut denc = vec![0.0; enc.states.len()];
        let n_dec = dec.ids.len();
        for (li, layer) in self.params.decoder.iter().enumerate().rev() {
            let c = &dec.layers[li];
            let gl = &mut g.decoder[li];

            let mut df = dy.clone();
            ops::apply_mask(&mut df, c.drop_ffn.as_ref());
            let dc = ffn_bwd(&layer.ffn, &mut gl.ffn, &c.ffn, &df, n_dec);
            add_into(&mut dy, &ops::layer_norm_bwd(&layer.ln_ffn, &mut gl.ln_ffn, &c.ln_ffn, &dc, d));

            let mut dca = dy.clone();
            ops::apply_mask(&mut dca, c.drop_cross.as_ref());
            let (db, dkv) =
                ops::attention_bwd(&layer.cross_attn, &mut gl.cross_attn, &c.cross_attn, &dec.cross_segs, heads, &dca, d);
            add_into(&mut denc, &dkv);
            add_into(&mut dy, &ops::layer_norm_bwd(&layer.ln_cross, &mut gl.ln_cross, &c.ln_cross, &db, d));

            let mut dsa = dy.clone();
            ops::apply_mask(&mut dsa, c.drop_self.as_ref());
            let (da_q, da_kv) =
                ops::attention_bwd(&layer.self_attn, &mut gl.self_attn, &c.self_attn, &dec.self_segs, heads, &dsa, d);
            let mut da = da_q;
            add_into(&mut da, &da_kv);
            add_into(&mut dy, &ops::layer_norm_bwd(&layer.ln_self, &mut gl.ln_self, &c.ln_self, &da, d));
        }
        ops::apply_mask(&mut dy, dec.drop_embed.as_ref());
        let scale = (d as f64).sqrt();
        for (t, &id) in dec.ids.iter().enumerate() {
            let row = &dy[t * d..(t + 1) * d];
            let e = &mut g.embedding.data[id * d..(id + 1) * d];
            for c in 0..d {
                e[c] += scale * row[c];
            }
            if self.config.use_decoder_lang_code {
                let li = dec.langs[t].index();
                let code = &mut g.lang_codes.data[li * d..(li + 1) * d];
                for c in 0..d {
                    code[c] += scale * row[c];
                }
            }
        }

        // encoder
        let mut dx = ops::layer_norm_bwd(&self.params.enc_norm, &mut g.enc_norm, &enc.final_ln, &denc, d);
        let n_enc = enc.ids.len();
        let enc_segs: Vec<Segment> = enc
            .segments
            .iter()
            .map(|&(s, l)| Segment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect();
        for (li, layer) in self.params.encoder.iter().enumerate().rev() {
            let c = &enc.layers[li];
            let gl = &mut g.encoder[li];

            let mut df = dx.clone();
            ops::apply_mask(&mut df, c.drop_ffn.as_ref());
            let db = ffn_bwd(&layer.ffn, &mut gl.ffn, &c.ffn, &df, n_enc);
            add_into(&mut dx, &ops::layer_norm_bwd(&layer.ln_ffn, &mut gl.ln_ffn, &c.ln_ffn, &db, d));

            let mut dsa = dx.clone();
            ops::apply_mask(&mut dsa, c.drop_attn.as_ref());
            let (da_q, da_kv) =
                ops::attention_bwd(&layer.self_attn, &mut gl.self_attn, &c.attn, &enc_segs, heads, &dsa, d);
            let mut da = da_q;
            add_into(&mut da, &da_kv);
            add_into(&mut dx, &ops::layer_norm_bwd(&layer.ln_attn, &mut gl.ln_attn, &c.ln_attn, &da, d));
        }
        ops::apply_mask(&mut dx, enc.drop_embed.as_ref());
        for (t, &id) in enc.ids.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let e = &mut g.embedding.data[id * d..(id + 1) * d];
            for c in 0..d {
                e[c] += scale * row[c];
            }
        }

        if !g.all_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        Ok((loss, g))
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Mean natural-log cross-entropy of packed `n x v` logits against
/// `targets`.
pub fn cross_entropy(logits: &[f64], targets: &[usize], v: usize) -> Result<f64> {
    Ok(cross_entropy_sum(logits, targets, v)? / targets.len() as f64)
}

/// Summed cross-entropy; errors when there are no target tokens.
pub fn cross_entropy_sum(logits: &[f64], targets: &[usize], v: usize) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("loss over zero target tokens"));
    }
    let mut total = 0.0;
    for (row, &t) in logits.chunks(v).zip(targets) {
        total -= log_softmax(row)[t];
    }
    Ok(total)
}

fn cross_entropy_with_grad(logits: &[f64], targets: &[usize], v: usize) -> Result<(f64, Vec<f64>)> {
    if targets.is_empty() {
        return Err(Error::invalid("loss over zero target tokens"));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, g), &t) in logits.chunks(v).zip(grad.chunks_mut(v)).zip(targets) {
        let ls = log_softmax(row);
        total -= ls[t];
        for (gi, l) in g.iter_mut().zip(&ls) {
            *gi = l.exp() / n;
        }
        g[t] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

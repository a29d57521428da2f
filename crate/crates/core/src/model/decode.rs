//! Greedy and beam decoding with per-hypothesis key/value caches.

use serde::{Deserialize, Serialize};

use super::ops;
use super::transformer::{log_softmax, Side};
use super::Model;
use crate::error::{Error, Result};
use crate::text::vocab::{is_special, EOS};
use crate::text::Lang;

/// Beam scores are `log p / length^BEAM_ALPHA`.
pub const BEAM_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Self::Greedy);
        }
        let width = s
            .strip_prefix("beam")
            .map(|w| w.trim_start_matches([':', '=']))
            .and_then(|w| if w.is_empty() { Some(4) } else { w.parse().ok() });
        match width {
            Some(w) if w >= 1 => Ok(Self::Beam(w)),
            _ => Err(Error::invalid(format!("unknown decoding strategy `{s}`"))),
        }
    }
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
    source: usize,
    lang: Lang,
    /// Per layer: cached self-attention keys and values, `t x d` each.
    cache: Vec<(Vec<f64>, Vec<f64>)>,
}

struct CrossKv {
    k: Vec<f64>,
    v: Vec<f64>,
}

struct Decoder<'m> {
    model: &'m Model,
    cross: Vec<CrossKv>,
    segments: Vec<(usize, usize)>,
}

fn attend(q: &[f64], keys: &[f64], vals: &[f64], heads: usize, d: usize, out: &mut [f64]) {
    let dh = d / heads;
    let n = keys.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut s = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        let qh = &q[off..off + dh];
        let mut max = f64::NEG_INFINITY;
        for (j, sj) in s.iter_mut().enumerate() {
            let kj = &keys[j * d + off..j * d + off + dh];
            *sj = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*sj);
        }
        let mut sum = 0.0;
        for sj in s.iter_mut() {
            *sj = (*sj - max).exp();
            sum += *sj;
        }
        let o = &mut out[off..off + dh];
        for (j, sj) in s.iter().enumerate() {
            let p = sj / sum;
            let vj = &vals[j * d + off..j * d + off + dh];
            for (a, b) in o.iter_mut().zip(vj) {
                *a += p * b;
            }
        }
    }
}

impl<'m> Decoder<'m> {
    fn new(model: &'m Model, sources: &[&[usize]]) -> Result<Self> {
        let t = model.transformer();
        let enc = t.encode(sources, None)?;
        let n = enc.states.len() / model.config.dim;
        let cross = model
            .params
            .decoder
            .iter()
            .map(|l| CrossKv {
                k: ops::linear_fwd(&l.cross_attn.k, &enc.states, n),
                v: ops::linear_fwd(&l.cross_attn.v, &enc.states, n),
            })
            .collect();
        Ok(Self {
            model,
            cross,
            segments: enc.segments,
        })
    }

    fn start(&self, source: usize, lang: Lang) -> Hyp {
        Hyp {
            tokens: vec![self.model.config.decoder_bos(lang)],
            logp: 0.0,
            source,
            lang,
            cache: vec![(Vec::new(), Vec::new()); self.model.config.layers],
        }
    }

    /// Feeds each hypothesis its last token; returns log-probabilities of
    /// the next token, one row per hypothesis.
    fn step(&self, hyps: &mut [Hyp]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.model.config;
        let d = cfg.dim;
        let heads = cfg.heads;
        let t = self.model.transformer();
        let n = hyps.len();
        let mut x = Vec::with_capacity(n * d);
        for h in hyps.iter() {
            let pos = h.tokens.len() - 1;
            x.extend(t.embed(&h.tokens[pos..], Side::Decoder, h.lang, pos)?);
        }
        for (li, layer) in self.model.params.decoder.iter().enumerate() {
            let (a, _) = ops::layer_norm_fwd(&layer.ln_self, &x, d);
            let q = ops::linear_fwd(&layer.self_attn.q, &a, n);
            let k = ops::linear_fwd(&layer.self_attn.k, &a, n);
            let v = ops::linear_fwd(&layer.self_attn.v, &a, n);
            let mut concat = vec![0.0; n * d];
            for (r, h) in hyps.iter_mut().enumerate() {
                let (ck, cv) = &mut h.cache[li];
                ck.extend_from_slice(&k[r * d..(r + 1) * d]);
                cv.extend_from_slice(&v[r * d..(r + 1) * d]);
                attend(&q[r * d..(r + 1) * d], ck, cv, heads, d, &mut concat[r * d..(r + 1) * d]);
            }
            let y = ops::linear_fwd(&layer.self_attn.o, &concat, n);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);

            let (b, _) = ops::layer_norm_fwd(&layer.ln_cross, &x, d);
            let q = ops::linear_fwd(&layer.cross_attn.q, &b, n);
            let mut concat = vec![0.0; n * d];
            let kv = &self.cross[li];
            for (r, h) in hyps.iter().enumerate() {
                let (s, l) = self.segments[h.source];
                attend(
                    &q[r * d..(r + 1) * d],
                    &kv.k[s * d..(s + l) * d],
                    &kv.v[s * d..(s + l) * d],
                    heads,
                    d,
                    &mut concat[r * d..(r + 1) * d],
                );
            }
            let y = ops::linear_fwd(&layer.cross_attn.o, &concat, n);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);

            let (c, _) = ops::layer_norm_fwd(&layer.ln_ffn, &x, d);
            let mut hdn = ops::linear_fwd(&layer.ffn.up, &c, n);
            hdn.iter_mut().for_each(|z| *z = ops::gelu(*z));
            let y = ops::linear_fwd(&layer.ffn.down, &hdn, n);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("decoder layer {li}")));
            }
        }
        let (h, _) = ops::layer_norm_fwd(&self.model.params.dec_norm, &x, d);
        let logits = t.logits(&h);
        let v = self.model.params.vocab_size();
        Ok(logits.chunks(v).map(log_softmax).collect())
    }
}

/// Tokens the decoder may emit: everything but specials, plus EOS.
fn allowed(id: usize) -> bool {
    id == EOS || !is_special(id)
}

fn argmax_allowed(row: &[f64]) -> usize {
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub(crate) fn generate(
    model: &Model,
    sources: &[&[usize]],
    targets: &[Lang],
    strategy: Strategy,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if sources.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: sources.len(),
            actual: targets.len(),
        });
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let limit = model.config.max_len;
    let truncated: Vec<&[usize]> = sources.iter().map(|s| &s[..s.len().min(limit)]).collect();
    if truncated.iter().any(|s| s.is_empty()) {
        return Err(Error::invalid("empty source sequence"));
    }
    // the decoder input holds BOS plus every generated token but the last
    let steps = max_len.min(limit);
    let dec = Decoder::new(model, &truncated)?;
    match strategy {
        Strategy::Greedy => greedy(&dec, targets, steps),
        Strategy::Beam(width) => (0..sources.len())
            .map(|i| beam(&dec, i, targets[i], width.max(1), steps))
            .collect(),
    }
}

fn greedy(dec: &Decoder<'_>, targets: &[Lang], steps: usize) -> Result<Vec<Vec<usize>>> {
    let mut live: Vec<Hyp> = targets.iter().enumerate().map(|(i, &l)| dec.start(i, l)).collect();
    let mut done: Vec<Option<Vec<usize>>> = vec![None; targets.len()];
    for step in 0..steps {
        if live.is_empty() {
            break;
        }
        let rows = dec.step(&mut live)?;
        let mut next = Vec::with_capacity(live.len());
        for (mut h, row) in live.into_iter().zip(rows) {
            let tok = argmax_allowed(&row);
            if tok == EOS {
                done[h.source] = Some(h.tokens[1..].to_vec());
            } else {
                h.tokens.push(tok);
                if step + 1 == steps {
                    done[h.source] = Some(h.tokens[1..].to_vec());
                } else {
                    next.push(h);
                }
            }
        }
        live = next;
    }
    Ok(done.into_iter().map(|d| d.unwrap_or_default()).collect())
}

fn beam(dec: &Decoder<'_>, source: usize, lang: Lang, width: usize, steps: usize) -> Result<Vec<usize>> {
    let score = |logp: f64, len: usize| logp / (len.max(1) as f64).powf(BEAM_ALPHA);
    let mut live = vec![dec.start(source, lang)];
    // (normalized score, tokens)
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for step in 0..steps {
        if live.is_empty() || finished.len() >= width {
            break;
        }
        let rows = dec.step(&mut live)?;
        // (cumulative logp, hyp index, token)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, row) in rows.iter().enumerate() {
            let mut best: Vec<(f64, usize)> = row
                .iter()
                .enumerate()
                .filter(|(i, _)| allowed(*i))
                .map(|(i, &lp)| (live[hi].logp + lp, i))
                .collect();
            best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            best.truncate(2 * width);
            cands.extend(best.into_iter().map(|(s, t)| (s, hi, t)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (rank, &(lp, hi, tok)) in cands.iter().enumerate() {
            if next.len() >= width {
                break;
            }
            let generated = live[hi].tokens.len();
            if tok == EOS {
                if rank < width {
                    finished.push((score(lp, generated), live[hi].tokens[1..].to_vec()));
                }
                continue;
            }
            let mut h = live[hi].clone();
            h.tokens.push(tok);
            h.logp = lp;
            next.push(h);
        }
        if step + 1 == steps {
            for h in &next {
                finished.push((score(h.logp, h.tokens.len() - 1), h.tokens[1..].to_vec()));
            }
            next.clear();
        }
        live = next;
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for (s, toks) in finished {
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, toks));
        }
    }
    Ok(best.map(|b| b.1).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn strategy_parsing() {
        assert_eq!("greedy".parse::<Strategy>().unwrap(), Strategy::Greedy);
        assert_eq!("beam:5".parse::<Strategy>().unwrap(), Strategy::Beam(5));
        assert_eq!("beam".parse::<Strategy>().unwrap(), Strategy::Beam(4));
        assert!("beam:0".parse::<Strategy>().is_err());
        assert!("sample".parse::<Strategy>().is_err());
    }

    #[test]
    fn incremental_step_matches_full_forward() {
        let model = Model::new(ModelConfig::tiny(), 30, 5).unwrap();
        let src: Vec<usize> = vec![8, 9, 10, 11];
        let prefix: Vec<usize> = vec![2, 12, 13, 14];
        let dec = Decoder::new(&model, &[&src]).unwrap();
        let mut hyp = dec.start(0, Lang::Tgt);
        let mut rows = Vec::new();
        for (i, &tok) in prefix.iter().enumerate() {
            if i > 0 {
                hyp.tokens.push(tok);
            }
            rows.push(dec.step(std::slice::from_mut(&mut hyp)).unwrap().remove(0));
        }
        let ex = crate::model::Example {
            src: src.clone(),
            src_lang: Lang::Src,
            tgt_in: prefix.clone(),
            tgt_out: vec![12, 13, 14, 3],
            tgt_lang: Lang::Tgt,
            tgt_offset: 0,
        };
        let batch = crate::model::Batch::from_examples(&[ex]).unwrap();
        let out = model.forward(&batch, None).unwrap();
        for (t, row) in rows.iter().enumerate() {
            let full = log_softmax(out.at(0, t));
            for (a, b) in row.iter().zip(&full) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

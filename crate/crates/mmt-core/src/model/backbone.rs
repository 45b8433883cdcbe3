//! Transformer encoder/decoder with pseudo-token fusion.
//!
//! The encoder query sequence is the source embeddings with the
//! projected multimodal feature appended as extra rows; keys and values
//! stay restricted to the text rows, so the pseudo tokens read from the
//! sentence while the sentence representation itself stays text-driven.
//! The decoder cross-attends over the full fused memory. All blocks are
//! pre-norm; attention scores scale by 1/sqrt(d) of the model width.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::tensor::{ops::neg_inf_mask, Tensor};

/// One attention map captured during a forward pass, ready for JSON
/// export: `rows[i][j]` is the weight from query position i to key j.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub rows: Vec<Vec<f64>>,
}

pub(crate) struct Linear {
    name: String,
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn new(name: impl Into<String>, din: usize, dout: usize, rng: &mut impl Rng) -> Linear {
        Linear {
            name: name.into(),
            w: Tensor::param_randn(&[din, dout], (1.0 / din as f64).sqrt(), rng),
            b: Tensor::param(&[dout], vec![0.0; dout]).expect("bias"),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add_bias(&self.b)
    }

    fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{}.w", self.name), &self.w));
        out.push((format!("{}.b", self.name), &self.b));
    }
}

pub(crate) struct LayerNorm {
    name: String,
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(name: impl Into<String>, d: usize) -> LayerNorm {
        LayerNorm {
            name: name.into(),
            gain: Tensor::param(&[d], vec![1.0; d]).expect("gain"),
            bias: Tensor::param(&[d], vec![0.0; d]).expect("bias"),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, 1e-5)
    }

    fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{}.gain", self.name), &self.gain));
        out.push((format!("{}.bias", self.name), &self.bias));
    }
}

/// Standard sinusoidal position table, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[len, d], data).expect("position table")
}

/// Additive attention mask: 0 where allowed, a large negative constant
/// where blocked (pad keys and, when `causal`, future positions). The
/// constant is big enough that softmax underflows it to exactly zero.
fn additive_mask(lq: usize, lk: usize, key_pad: Option<&[bool]>, causal: bool) -> Option<Tensor> {
    let has_pad = key_pad.is_some_and(|p| p.iter().any(|x| *x));
    if !has_pad && !causal {
        return None;
    }
    let neg = neg_inf_mask();
    let mut data = vec![0.0; lq * lk];
    for i in 0..lq {
        for j in 0..lk {
            let pad = key_pad.is_some_and(|p| p[j]);
            if pad || (causal && j > i) {
                data[i * lk + j] = neg;
            }
        }
    }
    Some(Tensor::from_vec(&[lq, lk], data).expect("mask"))
}

struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    d_model: usize,
}

impl Attention {
    fn new(name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Attention {
        Attention {
            wq: Linear::new(format!("{name}.wq"), d, d, rng),
            wk: Linear::new(format!("{name}.wk"), d, d, rng),
            wv: Linear::new(format!("{name}.wv"), d, d, rng),
            wo: Linear::new(format!("{name}.wo"), d, d, rng),
            heads,
            d_model: d,
        }
    }

    /// Multi-head attention with per-head column slices of shared
    /// projections. `record` captures every head's weight matrix.
    fn forward(
        &self,
        layer: usize,
        q_in: &Tensor,
        kv_in: &Tensor,
        key_pad: Option<&[bool]>,
        causal: bool,
        mut record: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Tensor> {
        let q = self.wq.apply(q_in)?;
        let k = self.wk.apply(kv_in)?;
        let v = self.wv.apply(kv_in)?;
        let (lq, lk) = (q.shape()[0], k.shape()[0]);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (self.d_model as f64).sqrt();
        let mask = additive_mask(lq, lk, key_pad, causal);
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
            let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
            let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
            let mut scores = qh.matmul(&kh.transpose2()?)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.add(m)?;
            }
            let weights = scores.softmax(1)?;
            if let Some(rec) = record.as_deref_mut() {
                let w = weights.data();
                let rows = (0..lq)
                    .map(|i| w[i * lk..(i + 1) * lk].to_vec())
                    .collect();
                rec.push(AttentionRecord {
                    layer,
                    head: h,
                    rows,
                });
            }
            heads_out.push(weights.matmul(&vh)?);
        }
        self.wo.apply(&Tensor::concat_cols(&heads_out)?)
    }

    fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        self.wq.collect(out);
        self.wk.collect(out);
        self.wv.collect(out);
        self.wo.collect(out);
    }
}

struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn new(name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> FeedForward {
        FeedForward {
            lin1: Linear::new(format!("{name}.ff1"), d, hidden, rng),
            lin2: Linear::new(format!("{name}.ff2"), hidden, d, rng),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.apply(&self.lin1.apply(x)?.relu())
    }

    fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        self.lin1.collect(out);
        self.lin2.collect(out);
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

pub struct Encoder {
    /// Projection of the generated feature rows into model width, `[C_m, d]`.
    pub wm: Tensor,
    layers: Vec<EncoderLayer>,
    ln_final: LayerNorm,
}

/// Encoder output plus the key-padding mask the decoder needs.
pub struct Memory {
    /// `[rows, d]` fused representation.
    pub states: Tensor,
    /// Pad flags aligned with `states` rows; pseudo-token rows are
    /// never padding.
    pub pad: Vec<bool>,
    /// Number of leading text rows (0 in the text-excluded variant).
    pub text_rows: usize,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Encoder {
        let d = cfg.d_model;
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("enc.l{i}");
                EncoderLayer {
                    ln1: LayerNorm::new(format!("{n}.ln1"), d),
                    attn: Attention::new(&format!("{n}.attn"), d, cfg.heads, rng),
                    ln2: LayerNorm::new(format!("{n}.ln2"), d),
                    ff: FeedForward::new(&n, d, cfg.ffn, rng),
                }
            })
            .collect();
        Encoder {
            wm: Tensor::param_randn(
                &[cfg.feature_channels(), d],
                (1.0 / cfg.feature_channels() as f64).sqrt(),
                rng,
            ),
            layers,
            ln_final: LayerNorm::new("enc.ln_final", d),
        }
    }

    /// Append the projected feature rows to the text rows. Either part
    /// may be absent (text-only baseline / text-excluded variant), but
    /// not both.
    pub fn fuse(
        &self,
        text: Option<(&Tensor, &[bool])>,
        feature_rows: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<bool>, usize)> {
        match (text, feature_rows) {
            (Some((t, pad)), Some(m)) => {
                let proj = m.matmul(&self.wm)?;
                let fused = Tensor::concat_rows(&[t.clone(), proj])?;
                let mut full_pad = pad.to_vec();
                full_pad.extend(std::iter::repeat(false).take(m.shape()[0]));
                Ok((fused, full_pad, t.shape()[0]))
            }
            (Some((t, pad)), None) => Ok((t.clone(), pad.to_vec(), t.shape()[0])),
            (None, Some(m)) => {
                let proj = m.matmul(&self.wm)?;
                let rows = proj.shape()[0];
                Ok((proj, vec![false; rows], 0))
            }
            (None, None) => Err(Error::contract(
                "encoder needs text rows or feature rows".to_string(),
            )),
        }
    }

    /// Run the stack over a fused sequence. Keys/values come from the
    /// text rows when present, otherwise from the whole sequence.
    pub fn forward(
        &self,
        fused: &Tensor,
        pad: &[bool],
        text_rows: usize,
        mut record: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Memory> {
        if text_rows > 0 && pad[..text_rows].iter().all(|p| *p) {
            return Err(Error::contract(
                "encoder input is entirely padding".to_string(),
            ));
        }
        let mut x = fused.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let n1 = layer.ln1.apply(&x)?;
            let (kv, key_pad) = if text_rows > 0 {
                (n1.slice_rows(0, text_rows)?, &pad[..text_rows])
            } else {
                (n1.clone(), pad)
            };
            let attn =
                layer
                    .attn
                    .forward(i, &n1, &kv, Some(key_pad), false, record.as_deref_mut())?;
            x = x.add(&attn)?;
            let n2 = layer.ln2.apply(&x)?;
            x = x.add(&layer.ff.apply(&n2)?)?;
        }
        Ok(Memory {
            states: self.ln_final.apply(&x)?,
            pad: pad.to_vec(),
            text_rows,
        })
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("enc.wm".to_string(), &self.wm)];
        for l in &self.layers {
            l.ln1.collect(&mut out);
            l.attn.collect(&mut out);
            l.ln2.collect(&mut out);
            l.ff.collect(&mut out);
        }
        self.ln_final.collect(&mut out);
        out
    }
}

struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

pub struct Decoder {
    layers: Vec<DecoderLayer>,
    ln_final: LayerNorm,
    /// Output head to vocabulary logits.
    out: Linear,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, vocab: usize, rng: &mut impl Rng) -> Decoder {
        let d = cfg.d_model;
        let layers = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("dec.l{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(format!("{n}.ln1"), d),
                    self_attn: Attention::new(&format!("{n}.self"), d, cfg.heads, rng),
                    ln2: LayerNorm::new(format!("{n}.ln2"), d),
                    cross_attn: Attention::new(&format!("{n}.cross"), d, cfg.heads, rng),
                    ln3: LayerNorm::new(format!("{n}.ln3"), d),
                    ff: FeedForward::new(&n, d, cfg.ffn, rng),
                }
            })
            .collect();
        Decoder {
            layers,
            ln_final: LayerNorm::new("dec.ln_final", d),
            out: Linear::new("dec.out", d, vocab, rng),
        }
    }

    /// Causally-masked decoding over embedded prefix rows, returning
    /// `[rows, vocab]` logits. `cross_record` captures cross-attention
    /// maps per layer/head.
    pub fn forward(
        &self,
        y: &Tensor,
        memory: &Memory,
        mut cross_record: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Tensor> {
        let mut x = y.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let n1 = layer.ln1.apply(&x)?;
            let sa = layer.self_attn.forward(i, &n1, &n1, None, true, None)?;
            x = x.add(&sa)?;
            let n2 = layer.ln2.apply(&x)?;
            let ca = layer.cross_attn.forward(
                i,
                &n2,
                &memory.states,
                Some(&memory.pad),
                false,
                cross_record.as_deref_mut(),
            )?;
            x = x.add(&ca)?;
            let n3 = layer.ln3.apply(&x)?;
            x = x.add(&layer.ff.apply(&n3)?)?;
        }
        self.out.apply(&self.ln_final.apply(&x)?)
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.ln1.collect(&mut out);
            l.self_attn.collect(&mut out);
            l.ln2.collect(&mut out);
            l.cross_attn.collect(&mut out);
            l.ln3.collect(&mut out);
            l.ff.collect(&mut out);
        }
        self.ln_final.collect(&mut out);
        self.out.collect(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 32,
            ..Default::default()
        }
    }

    #[test]
    fn position_table_values() {
        let p = sinusoidal_positions(3, 4);
        let d = p.to_vec();
        assert_eq!(d[0], 0.0); // sin(0)
        assert_eq!(d[1], 1.0); // cos(0)
        assert!((d[4] - 1f64.sin()).abs() < 1e-12);
        assert!((d[5] - 1f64.cos()).abs() < 1e-12);
        // dimension pair 2,3 uses wavelength 10000^(2/4)
        assert!((d[6] - (1.0 / 100.0f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn masked_attention_ignores_padded_keys() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&c, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(&[4, 16], 1.0, &mut rng2);
        // Same first three rows, different content in the padded slot.
        let mut alt = t.to_vec();
        for v in &mut alt[3 * 16..] {
            *v += 5.0;
        }
        let t2 = Tensor::from_vec(&[4, 16], alt).unwrap();
        let pad = [false, false, false, true];
        let m1 = enc.forward(&t, &pad, 4, None).unwrap();
        let m2 = enc.forward(&t2, &pad, 4, None).unwrap();
        // Non-pad rows must be identical: the padded key contributes
        // exactly zero weight.
        let a = m1.states.to_vec();
        let b = m2.states.to_vec();
        assert_eq!(&a[..3 * 16], &b[..3 * 16]);
    }

    #[test]
    fn attention_rows_sum_to_one_over_real_keys() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new(&c, &mut rng);
        let t = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let pad = [false, false, true, true, false];
        let mut rec = Vec::new();
        enc.forward(&t, &pad, 5, Some(&mut rec)).unwrap();
        assert_eq!(rec.len(), 2 * 2); // layers x heads
        for r in &rec {
            for row in &r.rows {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert_eq!(row[2], 0.0);
                assert_eq!(row[3], 0.0);
            }
        }
    }

    #[test]
    fn all_pad_rejected() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(&c, &mut rng);
        let t = Tensor::zeros(&[2, 16]);
        assert!(matches!(
            enc.forward(&t, &[true, true], 2, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fusion_appends_projected_feature_rows() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = Encoder::new(&c, &mut rng);
        let t = Tensor::randn(&[3, 16], 1.0, &mut rng);
        let m = Tensor::randn(&[16, 128], 1.0, &mut rng);
        let pad = [false, false, true];
        let (fused, full_pad, text_rows) = enc.fuse(Some((&t, &pad)), Some(&m)).unwrap();
        assert_eq!(fused.shape(), &[19, 16]);
        assert_eq!(text_rows, 3);
        assert_eq!(full_pad.len(), 19);
        assert!(!full_pad[3..].iter().any(|p| *p));
        // text rows pass through unchanged
        assert_eq!(&fused.to_vec()[..3 * 16], &t.to_vec()[..]);
    }

    #[test]
    fn causal_decoder_prefix_invariance() {
        // Logits for position i must not depend on later target tokens.
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = Encoder::new(&c, &mut rng);
        let dec = Decoder::new(&c, 11, &mut rng);
        let src = Tensor::randn(&[4, 16], 1.0, &mut rng);
        let mem = enc.forward(&src, &[false; 4], 4, None).unwrap();
        let y_full = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let logits_full = dec.forward(&y_full, &mem, None).unwrap();
        let y_prefix = y_full.slice_rows(0, 3).unwrap();
        let logits_prefix = dec.forward(&y_prefix, &mem, None).unwrap();
        let a = logits_full.to_vec();
        let b = logits_prefix.to_vec();
        for i in 0..3 * 11 {
            assert!((a[i] - b[i]).abs() < 1e-9, "position {i}");
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let c = ModelConfig {
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn: 12,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Encoder::new(&c, &mut rng);
        let x0 = Tensor::randn(&[3, 8], 0.7, &mut rng);
        let pad = [false, false, true];
        let r = crate::tensor::grad_check(
            |x| {
                let mem = enc.forward(x, &pad, 3, None)?;
                mem.states.mul(&mem.states)?.sum()
            },
            &x0,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn parameter_names_unique() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let enc = Encoder::new(&c, &mut rng);
        let dec = Decoder::new(&c, 20, &mut rng);
        let mut names: Vec<String> = enc
            .parameters()
            .into_iter()
            .chain(dec.parameters())
            .map(|(n, _)| n)
            .collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }
}

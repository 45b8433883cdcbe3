//! Full translation model: embeddings, transformer backbone, the
//! text-to-multimodal generator, and the teacher/student pair used for
//! distillation. Inference never touches an image; the teacher and
//! student only participate in training losses.

pub mod backbone;
pub mod config;
pub mod generator;

pub use backbone::{sinusoidal_positions, AttentionRecord, Decoder, Encoder, Memory};
pub use config::{CnnBackbone, DistillConfig, Granularity, ModelConfig, Similarity};
pub use generator::{Generator, MultimodalFeature};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BOS, EOS};
use crate::distill::{StudentNet, TeacherNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Model {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    /// Shared source/target embedding table, `[V, d]`.
    pub embed: Tensor,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub generator: Generator,
    pub teacher: TeacherNet,
    pub student: StudentNet,
    pos: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab_size: usize) -> Result<Model> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::config("empty vocabulary".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let embed = Tensor::param_randn(&[vocab_size, d], (1.0 / d as f64).sqrt(), &mut rng);
        let encoder = Encoder::new(&cfg, &mut rng);
        let decoder = Decoder::new(&cfg, vocab_size, &mut rng);
        let generator = Generator::new(&cfg, &mut rng);
        let teacher = TeacherNet::new(&cfg, &mut rng);
        let student = StudentNet::new(&cfg, &mut rng);
        // Shape law: the generated feature, the teacher's final
        // activation, and the student's input must all agree.
        let expect = vec![1, cfg.feature_channels(), cfg.feature_spatial(), cfg.feature_spatial()];
        assert_eq!(teacher.final_shape(), expect, "teacher output shape");
        assert_eq!(student.feature_shape(), expect.as_slice(), "student input shape");
        let pos = sinusoidal_positions(cfg.max_len, d);
        Ok(Model {
            cfg,
            vocab_size,
            embed,
            encoder,
            decoder,
            generator,
            teacher,
            student,
            pos,
        })
    }

    /// Token embeddings with sinusoidal positions added, `[len, d]`.
    fn embed_with_positions(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::contract("cannot embed an empty sequence".to_string()));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        let e = self.embed.embedding(ids)?;
        e.add(&self.pos.slice_rows(0, ids.len())?)
    }

    /// Encode one source sentence. Returns the decoder memory and, when
    /// the multimodal path is on, the generated feature (both layouts).
    pub fn encode(
        &self,
        src: &[usize],
        src_pad: &[bool],
        record: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<(Memory, Option<MultimodalFeature>)> {
        if src.len() != src_pad.len() {
            return Err(Error::contract(format!(
                "source has {} tokens but {} pad flags",
                src.len(),
                src_pad.len()
            )));
        }
        let x = self.embed_with_positions(src)?;
        let keep: Vec<bool> = src_pad.iter().map(|p| !p).collect();
        let feature = if self.cfg.use_multimodal {
            Some(self.generator.generate(&x, &keep)?)
        } else {
            None
        };
        let (fused, pad, text_rows) = if self.cfg.without_text_features {
            let f = feature.as_ref().ok_or_else(|| {
                Error::config("text-excluded variant requires the multimodal path".to_string())
            })?;
            self.encoder.fuse(None, Some(&f.rows))?
        } else {
            self.encoder
                .fuse(Some((&x, src_pad)), feature.as_ref().map(|f| &f.rows))?
        };
        let memory = self.encoder.forward(&fused, &pad, text_rows, record)?;
        Ok((memory, feature))
    }

    /// Teacher-forced logits for target prefix rows `tgt[..n-1]`,
    /// predicting `tgt[1..n]`; `[n-1, V]`.
    pub fn forced_logits(
        &self,
        memory: &Memory,
        tgt: &[usize],
        record: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Tensor> {
        if tgt.len() < 2 {
            return Err(Error::contract(
                "teacher forcing needs at least two target tokens".to_string(),
            ));
        }
        let y = self.embed_with_positions(&tgt[..tgt.len() - 1])?;
        self.decoder.forward(&y, memory, record)
    }

    /// Summed next-token cross-entropy for one unpadded example, plus
    /// the number of predicted tokens.
    pub fn example_loss(&self, src: &[usize], tgt: &[usize]) -> Result<(Tensor, usize)> {
        let pad = vec![false; src.len()];
        let (memory, _) = self.encode(src, &pad, None)?;
        let logits = self.forced_logits(&memory, tgt, None)?;
        let loss = logits.cross_entropy(&tgt[1..], None)?;
        Ok((loss, tgt.len() - 1))
    }

    /// Greedy decode from `<bos>`; returns the full sequence including
    /// `<bos>` and, when produced, `<eos>`.
    pub fn greedy_decode(&self, src: &[usize]) -> Result<Vec<usize>> {
        let pad = vec![false; src.len()];
        let (memory, _) = self.encode(src, &pad, None)?;
        let mut seq = vec![BOS];
        while seq.len() < self.cfg.max_len {
            let y = self.embed_with_positions(&seq)?;
            let logits = self.decoder.forward(&y, &memory, None)?;
            let next = argmax_row(&logits, seq.len() - 1);
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(seq)
    }

    /// Beam search with length-normalized log-probability scores.
    /// Ties break toward the lower token id.
    pub fn beam_decode(&self, src: &[usize], beam: usize) -> Result<Vec<usize>> {
        if beam == 0 {
            return Err(Error::contract("beam width must be > 0".to_string()));
        }
        let pad = vec![false; src.len()];
        let (memory, _) = self.encode(src, &pad, None)?;
        // (sequence, summed logprob, finished)
        let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(vec![BOS], 0.0, false)];
        for _ in 1..self.cfg.max_len {
            if beams.iter().all(|(_, _, done)| *done) {
                break;
            }
            let mut candidates: Vec<(Vec<usize>, f64, bool)> = Vec::new();
            for (seq, score, done) in &beams {
                if *done {
                    candidates.push((seq.clone(), *score, true));
                    continue;
                }
                let y = self.embed_with_positions(seq)?;
                let logits = self.decoder.forward(&y, &memory, None)?;
                let lp = log_softmax_row(&logits, seq.len() - 1);
                // Expanding only the `beam` best tokens is enough: no
                // other token can enter the next top-`beam` set.
                let mut idx: Vec<usize> = (0..lp.len()).collect();
                idx.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
                for &tok in idx.iter().take(beam) {
                    let mut s = seq.clone();
                    s.push(tok);
                    candidates.push((s, score + lp[tok], tok == EOS));
                }
            }
            candidates.sort_by(|a, b| {
                let na = a.1 / (a.0.len() - 1) as f64;
                let nb = b.1 / (b.0.len() - 1) as f64;
                nb.partial_cmp(&na).unwrap().then(a.0.cmp(&b.0))
            });
            candidates.truncate(beam);
            beams = candidates;
        }
        Ok(beams.into_iter().next().expect("non-empty beam").0)
    }

    /// All tensors by name, including the frozen teacher (for
    /// checkpoints). Trainable parameters are the `requires_grad` subset.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        out.extend(self.encoder.parameters());
        out.extend(self.decoder.parameters());
        out.extend(self.generator.parameters());
        out.extend(self.teacher.parameters());
        out.extend(self.student.parameters());
        out
    }

    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }
}

fn argmax_row(logits: &Tensor, row: usize) -> usize {
    let v = logits.shape()[1];
    let d = logits.data();
    let slice = &d[row * v..(row + 1) * v];
    let mut best = 0;
    for (i, x) in slice.iter().enumerate() {
        if *x > slice[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_row(logits: &Tensor, row: usize) -> Vec<f64> {
    let v = logits.shape()[1];
    let d = logits.data();
    let slice = &d[row * v..(row + 1) * v];
    let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logz = slice.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    slice.iter().map(|x| x - logz).collect()
}

//! Evaluation: corpus BLEU, feature retrieval, masking degradation,
//! disambiguation accuracy, and the ablation grid.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{SynthMeta, TripletExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    DistillConfig, Granularity, Model, ModelConfig, Similarity,
};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

/// Corpus-level BLEU-4 with per-order precisions and brevity penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    map
}

fn lc_tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Uncased, unsmoothed corpus BLEU-4 with clipped n-gram counts.
/// Any zero n-gram precision zeroes the whole score.
pub fn bleu4(hypotheses: &[String], references: &[String]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Alignment {
            src: hypotheses.len(),
            tgt: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::contract("BLEU needs at least one sentence".to_string()));
    }
    let hyps: Vec<Vec<String>> = hypotheses.iter().map(|h| lc_tokens(h)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| lc_tokens(r)).collect();
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(&refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, count) in &hc {
                total[n - 1] += count;
                matched[n - 1] += rc.get(gram).copied().unwrap_or(0).min(*count);
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|p| *p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        brevity_penalty * log_mean.exp() * 100.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Greedy-translate every source and detokenize against the vocabulary.
pub fn translate_corpus(model: &Model, examples: &[TripletExample], vocab: &Vocabulary) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|ex| Ok(vocab.decode_ids(&model.greedy_decode(&ex.source)?)))
        .collect()
}

/// BLEU of model translations against the reference targets.
pub fn corpus_bleu(model: &Model, examples: &[TripletExample], vocab: &Vocabulary) -> Result<BleuReport> {
    let hyps = translate_corpus(model, examples, vocab)?;
    let refs: Vec<String> = examples
        .iter()
        .map(|ex| vocab.decode_ids(&ex.target))
        .collect();
    bleu4(&hyps, &refs)
}

/// Pairwise cosine similarity, `[queries, gallery]`. Zero vectors get
/// similarity 0 against everything.
pub fn cosine_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Tensor> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::contract("empty retrieval set".to_string()));
    }
    let d = queries[0].len();
    if queries.iter().chain(gallery).any(|v| v.len() != d) {
        return Err(Error::dimension(
            "retrieval vectors must share one dimension".to_string(),
        ));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut data = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        let nq = norm(q);
        for g in gallery {
            let ng = norm(g);
            if nq < 1e-12 || ng < 1e-12 {
                data.push(0.0);
            } else {
                let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
                data.push(dot / (nq * ng));
            }
        }
    }
    Tensor::from_vec(&[queries.len(), gallery.len()], data)
}

/// Recall@K where query i's correct gallery item is index i. Ties rank
/// the lower index first, so the reported numbers are deterministic.
pub fn recall_at_k(similarity: &Tensor, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if similarity.rank() != 2 {
        return Err(Error::dimension(format!(
            "similarity matrix must be rank 2, got {:?}",
            similarity.shape()
        )));
    }
    let (n, m) = (similarity.shape()[0], similarity.shape()[1]);
    if n > m {
        return Err(Error::contract(format!(
            "{n} queries but only {m} gallery items"
        )));
    }
    let d = similarity.data();
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let row = &d[i * m..(i + 1) * m];
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        ranks.push(idx.iter().position(|&j| j == i).expect("index present"));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

/// Generated-feature vector (the projected channel vector) for one
/// source sentence; the retrieval query side.
pub fn generated_feature_vector(model: &Model, src: &[usize]) -> Result<Vec<f64>> {
    let pad = vec![false; src.len()];
    let (_, feature) = model.encode(src, &pad, None)?;
    let f = feature.ok_or_else(|| {
        Error::config("retrieval needs the multimodal path enabled".to_string())
    })?;
    // All rows are identical; the first is the channel vector.
    let c = f.rows.shape()[1];
    Ok(f.rows.to_vec()[..c].to_vec())
}

/// Teacher feature vector (spatially averaged final activation) for one
/// image; the retrieval gallery side.
pub fn teacher_feature_vector(model: &Model, image: &Tensor) -> Result<Vec<f64>> {
    let trace = model.teacher.forward(image)?;
    let last = &trace.last().value;
    let shape = last.shape().to_vec();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let d = last.data();
    Ok((0..c)
        .map(|ch| d[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect())
}

/// Retrieval report over a triplet corpus: generated features query a
/// gallery of teacher image features.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub recalls: Vec<(usize, f64)>,
    pub queries: usize,
}

pub fn retrieval_eval(
    model: &Model,
    examples: &[TripletExample],
    ks: &[usize],
) -> Result<(RetrievalReport, Tensor)> {
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for ex in examples {
        let img = ex.image.as_ref().ok_or_else(|| {
            Error::contract("retrieval evaluation needs images".to_string())
        })?;
        queries.push(generated_feature_vector(model, &ex.source)?);
        gallery.push(teacher_feature_vector(model, img)?);
    }
    let sim = cosine_matrix(&queries, &gallery)?;
    let recalls = recall_at_k(&sim, ks)?;
    Ok((
        RetrievalReport {
            recalls,
            queries: queries.len(),
        },
        sim,
    ))
}

/// Fraction of examples whose forced-prefix argmax (restricted to the
/// two sense candidates) picks the image-consistent sense.
pub fn ambiguous_accuracy(
    model: &Model,
    examples: &[TripletExample],
    metas: &[SynthMeta],
    vocab: &Vocabulary,
) -> Result<f64> {
    if examples.len() != metas.len() {
        return Err(Error::Alignment {
            src: examples.len(),
            tgt: metas.len(),
        });
    }
    if examples.is_empty() {
        return Err(Error::contract("no examples to score".to_string()));
    }
    let mut correct = 0usize;
    let mut scored = 0usize;
    for (ex, meta) in examples.iter().zip(metas) {
        let (Some(row), Some((sense_a, sense_b)), Some(chosen)) = (
            meta.amb_target_row,
            meta.sense_tokens.as_ref(),
            meta.chosen_sense.as_ref(),
        ) else {
            continue;
        };
        let pad = vec![false; ex.source.len()];
        let (memory, _) = model.encode(&ex.source, &pad, None)?;
        let logits = model.forced_logits(&memory, &ex.target, None)?;
        // Row r-1 predicts target position r.
        let row = row - 1;
        let v = logits.shape()[1];
        let data = logits.data();
        let slice = &data[row * v..(row + 1) * v];
        let (ia, ib) = (vocab.id(sense_a), vocab.id(sense_b));
        // Restricted argmax over the two senses; ties pick the lower id.
        let best = if slice[ib] > slice[ia] {
            ib
        } else if slice[ia] > slice[ib] {
            ia
        } else {
            ia.min(ib)
        };
        scored += 1;
        if best == vocab.id(chosen) {
            correct += 1;
        }
    }
    if scored == 0 {
        return Err(Error::contract(
            "no ambiguous examples in the evaluation set".to_string(),
        ));
    }
    Ok(correct as f64 / scored as f64)
}

/// Clean-versus-degraded translation quality under source masking.
#[derive(Debug, Clone, Serialize)]
pub struct DegradationReport {
    pub clean: BleuReport,
    pub masked: BleuReport,
    pub masked_fraction: f64,
    /// True when the model never saw the mask token during training.
    pub zero_shot: bool,
}

pub fn degradation_eval(
    model: &Model,
    clean: &[TripletExample],
    masked: &[TripletExample],
    vocab: &Vocabulary,
    masked_fraction: f64,
    zero_shot: bool,
) -> Result<DegradationReport> {
    Ok(DegradationReport {
        clean: corpus_bleu(model, clean, vocab)?,
        masked: corpus_bleu(model, masked, vocab)?,
        masked_fraction,
        zero_shot,
    })
}

/// One ablation grid cell: a named configuration overlay.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub bleu: Option<f64>,
    /// BLEU difference to the base row, rounded to 2 decimals.
    pub delta: Option<f64>,
    pub error: Option<String>,
}

/// The standard grid: base, similarity variants, granularity variants,
/// and loss-removal variants.
pub fn ablation_grid(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let with = |f: &dyn Fn(&mut DistillConfig)| {
        let mut c = base.clone();
        f(&mut c.distill);
        c
    };
    vec![
        ("base".to_string(), base.clone()),
        ("sim-l1".to_string(), with(&|d| d.similarity = Similarity::L1)),
        ("sim-linf".to_string(), with(&|d| d.similarity = Similarity::Linf)),
        ("sim-cosine".to_string(), with(&|d| d.similarity = Similarity::Cosine)),
        ("sim-kl".to_string(), with(&|d| d.similarity = Similarity::Kl)),
        ("gran-block".to_string(), with(&|d| d.granularity = Granularity::Block)),
        ("gran-layer".to_string(), with(&|d| d.granularity = Granularity::Layer)),
        ("no-distill".to_string(), with(&|d| {
            d.enable_irm = false;
            d.enable_iam = false;
        })),
        ("image-space-only".to_string(), with(&|d| d.image_space_only = true)),
        ("no-feature-loss".to_string(), with(&|d| d.enable_iam = false)),
        ("no-representation-loss".to_string(), with(&|d| d.enable_irm = false)),
    ]
}

/// Train one configuration and score BLEU on the evaluation slice.
pub fn run_ablation_cell(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train_set: &[TripletExample],
    eval_set: &[TripletExample],
    vocab: &Vocabulary,
) -> Result<f64> {
    let model = Model::new(cfg.clone(), vocab.len())?;
    train(&model, train_set, tcfg, None, None)?;
    Ok(corpus_bleu(&model, eval_set, vocab)?.bleu)
}

/// Run the whole grid sequentially. A failing cell records its error
/// and the grid continues.
pub fn ablate(
    base: &ModelConfig,
    tcfg: &TrainConfig,
    train_set: &[TripletExample],
    eval_set: &[TripletExample],
    vocab: &Vocabulary,
) -> Result<Vec<AblationRow>> {
    let grid = ablation_grid(base);
    let mut rows = Vec::with_capacity(grid.len());
    let mut base_bleu = None;
    for (name, cfg) in grid {
        match run_ablation_cell(&cfg, tcfg, train_set, eval_set, vocab) {
            Ok(bleu) => {
                if name == "base" {
                    base_bleu = Some(bleu);
                }
                let delta = base_bleu.map(|b| ((bleu - b) * 100.0).round() / 100.0);
                rows.push(AblationRow {
                    name,
                    bleu: Some(bleu),
                    delta,
                    error: None,
                });
            }
            Err(e) => rows.push(AblationRow {
                name,
                bleu: None,
                delta: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_identity_is_100() {
        let lines = vec!["the cat sat on the mat".to_string(); 3];
        let r = bleu4(&lines, &lines).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn bleu_case_insensitive() {
        let h = vec!["The CAT sat on the mat here".to_string()];
        let r = vec!["the cat sat on the mat here".to_string()];
        assert!((bleu4(&h, &r).unwrap().bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_zero_when_no_four_gram_matches() {
        let h = vec!["a b c d e".to_string()];
        let r = vec!["a b c x e".to_string()];
        assert_eq!(bleu4(&h, &r).unwrap().bleu, 0.0);
    }

    #[test]
    fn bleu_clipping_limits_repeats() {
        // "the the the the the the the" vs "the cat": the reference has
        // one "the", so the seven hypothesis copies clip to 1/7.
        let h = vec!["the the the the the the the".to_string()];
        let r = vec!["the cat".to_string()];
        let rep = bleu4(&h, &r).unwrap();
        assert!((rep.precisions[0] - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(rep.bleu, 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_value() {
        // hyp shorter than ref: bp = exp(1 - r/h)
        let h = vec!["a b c d".to_string()];
        let r = vec!["a b c d e f g h".to_string()];
        let rep = bleu4(&h, &r).unwrap();
        assert!((rep.brevity_penalty - (1.0f64 - 8.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_length_mismatch_rejected() {
        let h = vec!["a".to_string()];
        assert!(matches!(bleu4(&h, &[]), Err(Error::Alignment { .. })));
    }

    #[test]
    fn cosine_matrix_hand_values() {
        let q = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let g = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let m = cosine_matrix(&q, &g).unwrap();
        let d = m.to_vec();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!((d[1] - 0.0).abs() < 1e-12);
        let s = 1.0 / 2f64.sqrt();
        assert!((d[2] - s).abs() < 1e-12);
        assert!((d[3] - s).abs() < 1e-12);
    }

    #[test]
    fn recall_ranks_and_monotonicity() {
        // Query 0 ranks itself first; query 1 ranks gallery 0 first by
        // tie-break, itself second.
        let sim = Tensor::from_vec(&[2, 3], vec![0.9, 0.1, 0.0, 0.5, 0.5, 0.2]).unwrap();
        let r = recall_at_k(&sim, &[1, 2, 3]).unwrap();
        assert_eq!(r[0], (1, 0.5));
        assert_eq!(r[1], (2, 1.0));
        assert_eq!(r[2], (3, 1.0));
        for w in r.windows(2) {
            assert!(w[1].1 >= w[0].1, "recall must be monotone in k");
        }
    }

    #[test]
    fn recall_needs_enough_gallery() {
        let sim = Tensor::from_vec(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(recall_at_k(&sim, &[1]).is_err());
    }

    #[test]
    fn ablation_grid_has_eleven_distinct_rows() {
        let grid = ablation_grid(&ModelConfig::default());
        assert_eq!(grid.len(), 11);
        let mut names: Vec<&str> = grid.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 11);
        // base row keeps the default distillation settings
        assert_eq!(grid[0].1.distill, DistillConfig::default());
    }
}

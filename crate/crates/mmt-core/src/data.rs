//! Corpus ingestion, vocabulary, batching, synthetic data generation and
//! the source-degradation masking transforms.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{io as tio, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// The degradation placeholder token of the masking experiments.
pub const MASK: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "[U]"];

/// Token <-> id map with five reserved entries. `[U]` is always present
/// so degradation runs never require re-tokenization.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from an iterator of tokens; duplicates collapse, order of
    /// first appearance decides ids.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        for t in tokens {
            if !v.index.contains_key(t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, token: &str) {
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, line number == id (the five specials first).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.tokens.join("\n") + "\n").map_err(Error::from)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len()
            || lines[..SPECIALS.len()] != SPECIALS[..]
        {
            return Err(Error::format(format!(
                "{}: vocabulary must start with the reserved tokens {SPECIALS:?}",
                path.display()
            )));
        }
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for line in lines {
            if v.index.contains_key(line) {
                return Err(Error::format(format!(
                    "{}: duplicate token {line:?}",
                    path.display()
                )));
            }
            v.push(line);
        }
        Ok(v)
    }
}

/// One aligned training record.
#[derive(Debug, Clone)]
pub struct TripletExample {
    /// Source token ids, no wrapping.
    pub source: Vec<usize>,
    /// Target ids wrapped in `<bos>` ... `<eos>`.
    pub target: Vec<usize>,
    /// `[3, H, W]` image in [0, 1], absent for text-only data.
    pub image: Option<Tensor>,
}

impl TripletExample {
    pub fn new(source: Vec<usize>, target_inner: Vec<usize>, image: Option<Tensor>) -> Result<Self> {
        if source.is_empty() || target_inner.is_empty() {
            return Err(Error::contract(
                "triplet example needs non-empty source and target".to_string(),
            ));
        }
        if let Some(img) = &image {
            if img.rank() != 3 || img.shape()[0] != 3 {
                return Err(Error::dimension(format!(
                    "image must be [3, H, W], got {:?}",
                    img.shape()
                )));
            }
        }
        let mut target = Vec::with_capacity(target_inner.len() + 2);
        target.push(BOS);
        target.extend_from_slice(&target_inner);
        target.push(EOS);
        Ok(TripletExample {
            source,
            target,
            image,
        })
    }
}

/// Right-padded batch; pad masks are true exactly where token == `<pad>`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_pad: Vec<Vec<bool>>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_pad: Vec<Vec<bool>>,
    pub images: Option<Vec<Tensor>>,
    /// Indices into the corpus this batch was drawn from.
    pub example_indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src.len()
    }
}

/// Load an aligned corpus; tokenization is whitespace splitting, unknown
/// tokens map to `<unk>`. Images, when a directory is given, are one
/// `{index}.tnsr` file per line.
pub fn load_corpus(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    image_dir: Option<&Path>,
    vocab: &Vocabulary,
) -> Result<Vec<TripletExample>> {
    let src_text = fs::read_to_string(src_path.as_ref())?;
    let tgt_text = fs::read_to_string(tgt_path.as_ref())?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Alignment {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
        });
    }
    let mut out = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(tgt_lines.iter()).enumerate() {
        let image = match image_dir {
            Some(dir) => {
                let img = tio::read_tensor(dir.join(format!("{i}.tnsr")))?;
                Some(img)
            }
            None => None,
        };
        out.push(TripletExample::new(
            vocab.encode_line(s),
            vocab.encode_line(t),
            image,
        )?);
    }
    Ok(out)
}

/// Knobs of the synthetic disambiguation task.
///
/// Each sentence carries exactly one ambiguous token (at the configured
/// rate) whose correct translation is decided by the color of a patch
/// rendered into the paired image. The patch color is a fixed function
/// of a cue token so the task stays a function of (source, image), but
/// the cue vocabulary is large enough that a text-only model cannot
/// cheaply memorize the cue-to-sense table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub ambiguity_rate: f64,
    pub num_common: usize,
    pub num_cues: usize,
    pub num_amb_types: usize,
    pub min_common: usize,
    pub max_common: usize,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1000,
            seed: 1,
            ambiguity_rate: 1.0,
            num_common: 24,
            num_cues: 96,
            num_amb_types: 4,
            min_common: 3,
            max_common: 6,
            image_size: 32,
            patch_size: 14,
        }
    }
}

/// Per-example generation record, persisted as `meta.json` so evaluation
/// can score the ambiguous decision in isolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub cue: String,
    pub color: usize,
    /// Row in the wrapped target sequence holding the sense token
    /// (the decoder predicts it from rows before it).
    pub amb_target_row: Option<usize>,
    pub sense_tokens: Option<(String, String)>,
    pub chosen_sense: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub src_lines: Vec<String>,
    pub tgt_lines: Vec<String>,
    pub images: Vec<Tensor>,
    pub meta: Vec<SynthMeta>,
    /// All tokens the generator can emit, source then target side.
    pub token_inventory: Vec<String>,
}

/// Deterministic synthetic corpus. Same config (incl. seed) -> identical
/// output, bit for bit.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n == 0 {
        return Err(Error::contract("synth_generate: n must be > 0".to_string()));
    }
    if !(0.0..=1.0).contains(&cfg.ambiguity_rate) {
        return Err(Error::contract(format!(
            "synth_generate: ambiguity_rate {} outside [0, 1]",
            cfg.ambiguity_rate
        )));
    }
    if cfg.num_cues < 2 || cfg.num_common == 0 || cfg.num_amb_types == 0 {
        return Err(Error::contract(
            "synth_generate: need >=2 cues, >=1 common word, >=1 ambiguous type".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let commons: Vec<String> = (0..cfg.num_common).map(|i| format!("w{i:02}")).collect();
    let cues: Vec<String> = (0..cfg.num_cues).map(|i| format!("c{i:03}")).collect();
    let ambs: Vec<String> = (0..cfg.num_amb_types).map(|i| format!("amb{i}")).collect();

    // Exactly balanced cue -> color map: half the cues (after a seeded
    // shuffle) point at each color, keeping the sense distribution near
    // 50/50 regardless of n.
    let mut cue_order: Vec<usize> = (0..cfg.num_cues).collect();
    cue_order.shuffle(&mut rng);
    let mut cue_color = vec![0usize; cfg.num_cues];
    for (rank, &c) in cue_order.iter().enumerate() {
        cue_color[c] = rank % 2;
    }

    let tgt_of = |tok: &str| -> String {
        // Fixed bilingual dictionary: source surface -> target surface.
        format!("T_{tok}")
    };

    let mut corpus = SynthCorpus {
        src_lines: Vec::with_capacity(cfg.n),
        tgt_lines: Vec::with_capacity(cfg.n),
        images: Vec::with_capacity(cfg.n),
        meta: Vec::with_capacity(cfg.n),
        token_inventory: Vec::new(),
    };

    for _ in 0..cfg.n {
        let cue_idx = rng.gen_range(0..cfg.num_cues);
        let color = cue_color[cue_idx];
        let ambiguous = rng.gen_bool(cfg.ambiguity_rate);
        let len = rng.gen_range(cfg.min_common..=cfg.max_common);

        let mut tokens: Vec<String> = (0..len)
            .map(|_| commons[rng.gen_range(0..cfg.num_common)].clone())
            .collect();
        tokens.push(cues[cue_idx].clone());
        let amb_type = if ambiguous {
            let a = rng.gen_range(0..cfg.num_amb_types);
            tokens.push(ambs[a].clone());
            Some(a)
        } else {
            None
        };
        tokens.shuffle(&mut rng);

        let tgt_tokens: Vec<String> = tokens
            .iter()
            .map(|t| {
                if let Some(a) = amb_type {
                    if *t == ambs[a] {
                        return if color == 0 {
                            format!("T_{t}_x")
                        } else {
                            format!("T_{t}_y")
                        };
                    }
                }
                tgt_of(t)
            })
            .collect();

        let amb_target_row = amb_type.map(|a| {
            // +1 for the <bos> the example wrapper prepends.
            tokens.iter().position(|t| *t == ambs[a]).unwrap() + 1
        });
        let sense_tokens = amb_type.map(|a| {
            (format!("T_{}_x", ambs[a]), format!("T_{}_y", ambs[a]))
        });
        let chosen_sense = amb_type.map(|a| {
            if color == 0 {
                format!("T_{}_x", ambs[a])
            } else {
                format!("T_{}_y", ambs[a])
            }
        });

        corpus.images.push(render_image(cfg, color, &mut rng));
        corpus.src_lines.push(tokens.join(" "));
        corpus.tgt_lines.push(tgt_tokens.join(" "));
        corpus.meta.push(SynthMeta {
            cue: cues[cue_idx].clone(),
            color,
            amb_target_row,
            sense_tokens,
            chosen_sense,
        });
    }

    for t in commons.iter().chain(cues.iter()) {
        corpus.token_inventory.push(t.clone());
        corpus.token_inventory.push(tgt_of(t));
    }
    for a in &ambs {
        corpus.token_inventory.push(a.clone());
        corpus.token_inventory.push(format!("T_{a}_x"));
        corpus.token_inventory.push(format!("T_{a}_y"));
    }
    Ok(corpus)
}

fn render_image(cfg: &SynthConfig, color: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = cfg.image_size;
    let p = cfg.patch_size.min(s);
    let max_off = s - p;
    let oy = if max_off > 0 { rng.gen_range(0..=max_off) } else { 0 };
    let ox = if max_off > 0 { rng.gen_range(0..=max_off) } else { 0 };
    let rgb = if color == 0 {
        [0.9, 0.1, 0.1]
    } else {
        [0.1, 0.1, 0.9]
    };
    let mut data = vec![0.5; 3 * s * s];
    for c in 0..3 {
        for y in oy..oy + p {
            for x in ox..ox + p {
                data[c * s * s + y * s + x] = rgb[c];
            }
        }
    }
    Tensor::from_vec(&[3, s, s], data).expect("image shape")
}

/// Build a vocabulary covering the generator's full token inventory.
pub fn synth_vocabulary(corpus: &SynthCorpus) -> Vocabulary {
    Vocabulary::build(corpus.token_inventory.iter().map(String::as_str))
}

/// Materialize a synthetic corpus as `TripletExample`s.
pub fn synth_examples(corpus: &SynthCorpus, vocab: &Vocabulary) -> Result<Vec<TripletExample>> {
    corpus
        .src_lines
        .iter()
        .zip(corpus.tgt_lines.iter())
        .zip(corpus.images.iter())
        .map(|((s, t), img)| {
            TripletExample::new(
                vocab.encode_line(s),
                vocab.encode_line(t),
                Some(img.clone()),
            )
        })
        .collect()
}

/// Replace every source token in `mask_set` with `[U]`. Target and image
/// are untouched; idempotent because `[U]` is never in the mask set
/// lookup by construction of token ids.
pub fn mask_tokens(
    example: &TripletExample,
    mask_ids: &HashSet<usize>,
) -> TripletExample {
    let mut out = example.clone();
    for id in out.source.iter_mut() {
        if mask_ids.contains(id) {
            *id = MASK;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskStats {
    pub masked_tokens: usize,
    pub total_tokens: usize,
}

impl MaskStats {
    pub fn fraction(&self) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.masked_tokens as f64 / self.total_tokens as f64
        }
    }
}

/// Mask a whole corpus and report how many source tokens were replaced.
pub fn mask_corpus(
    examples: &[TripletExample],
    mask_ids: &HashSet<usize>,
) -> (Vec<TripletExample>, MaskStats) {
    let mut stats = MaskStats {
        masked_tokens: 0,
        total_tokens: 0,
    };
    let masked = examples
        .iter()
        .map(|e| {
            stats.total_tokens += e.source.len();
            let m = mask_tokens(e, mask_ids);
            stats.masked_tokens += m
                .source
                .iter()
                .zip(e.source.iter())
                .filter(|(a, b)| a != b)
                .count();
            m
        })
        .collect();
    (masked, stats)
}

/// Resolve a set of surface tokens to ids for masking.
pub fn mask_set_ids(vocab: &Vocabulary, tokens: &[String]) -> HashSet<usize> {
    tokens
        .iter()
        .filter(|t| vocab.contains(t))
        .map(|t| vocab.id(t))
        .collect()
}

/// Shuffle with the seed, then chunk and right-pad. Deterministic per
/// (corpus, batch_size, seed).
pub fn batchify(examples: &[TripletExample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batchify: batch size must be > 0".to_string()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let src_max = chunk.iter().map(|&i| examples[i].source.len()).max().unwrap_or(0);
        let tgt_max = chunk.iter().map(|&i| examples[i].target.len()).max().unwrap_or(0);
        let mut batch = Batch {
            src: Vec::new(),
            src_pad: Vec::new(),
            tgt: Vec::new(),
            tgt_pad: Vec::new(),
            images: None,
            example_indices: chunk.to_vec(),
        };
        let mut images = Vec::new();
        let mut have_images = true;
        for &i in chunk {
            let e = &examples[i];
            let mut s = e.source.clone();
            s.resize(src_max, PAD);
            batch.src_pad.push(s.iter().map(|&t| t == PAD).collect());
            batch.src.push(s);
            let mut t = e.target.clone();
            t.resize(tgt_max, PAD);
            batch.tgt_pad.push(t.iter().map(|&t| t == PAD).collect());
            batch.tgt.push(t);
            match &e.image {
                Some(img) => images.push(img.clone()),
                None => have_images = false,
            }
        }
        if have_images && !images.is_empty() {
            batch.images = Some(images);
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Write corpus files in the module's on-disk formats.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    corpus: &SynthCorpus,
    vocab: &Vocabulary,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("train.src"), corpus.src_lines.join("\n") + "\n")?;
    fs::write(dir.join("train.tgt"), corpus.tgt_lines.join("\n") + "\n")?;
    vocab.save(dir.join("vocab.txt"))?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    for (i, img) in corpus.images.iter().enumerate() {
        tio::write_tensor(img_dir.join(format!("{i}.tnsr")), img)?;
    }
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&corpus.meta)?,
    )?;
    Ok(())
}

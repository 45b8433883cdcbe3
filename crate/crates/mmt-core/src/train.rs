//! Joint training: translation cross-entropy plus the two distillation
//! losses, optimized with Adam. Checkpoints capture parameters and
//! optimizer moments so a resumed run continues the same trajectory.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, TripletExample};
use crate::distill::{self, pair_representations};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{io as tio, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Shuffling seed (independent of the model seed).
    pub seed: u64,
    pub weight_translation: f64,
    pub weight_representation: f64,
    pub weight_feature: f64,
    /// Write a checkpoint every N steps when a directory is given.
    pub checkpoint_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            epochs: 1,
            max_steps: None,
            batch_size: 8,
            seed: 1,
            weight_translation: 1.0,
            weight_representation: 1.0,
            weight_feature: 1.0,
            checkpoint_interval: None,
        }
    }
}

/// Adam with bias correction. Moments align with a fixed parameter
/// list; the names are kept to validate checkpoints.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(tcfg: &TrainConfig, params: &[(String, &Tensor)]) -> Adam {
        Adam {
            lr: tcfg.lr,
            beta1: tcfg.beta1,
            beta2: tcfg.beta2,
            eps: tcfg.adam_eps,
            t: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update over the same parameter list the optimizer was built
    /// with. Parameters without a gradient this step are skipped.
    pub fn step(&mut self, params: &[(String, &Tensor)]) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.names.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.iter().enumerate() {
            if *name != self.names[i] {
                return Err(Error::contract(format!(
                    "parameter order changed: expected {}, got {}",
                    self.names[i], name
                )));
            }
            let Some(g) = p.grad() else { continue };
            let mut data = p.to_vec();
            for j in 0..data.len() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(&data)?;
        }
        Ok(())
    }
}

/// Per-step scalars, serialized as one JSON line each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub translation: f64,
    pub per_token: f64,
    pub representation: f64,
    pub feature: f64,
    pub tokens: usize,
}

/// Losses of a single (source, target, image) example. Disabled terms
/// come back as `None` and contribute an exact zero.
#[derive(Debug)]
pub struct ExampleLosses {
    pub translation: Tensor,
    pub tokens: usize,
    pub representation: Option<Tensor>,
    pub feature: Option<Tensor>,
}

/// Forward one example through every active loss path.
///
/// Distillation needs the real image: a missing image with distillation
/// enabled is a contract error (training requires triplets; inference
/// does not).
pub fn example_losses(model: &Model, ex: &TripletExample) -> Result<ExampleLosses> {
    let pad = vec![false; ex.source.len()];
    let (memory, feature) = model.encode(&ex.source, &pad, None)?;
    let logits = model.forced_logits(&memory, &ex.target, None)?;
    let translation = logits.cross_entropy(&ex.target[1..], None)?;
    let tokens = ex.target.len() - 1;

    let dcfg = &model.cfg.distill;
    let mut out = ExampleLosses {
        translation,
        tokens,
        representation: None,
        feature: None,
    };
    if !(dcfg.kd_enabled() && model.cfg.use_multimodal) {
        return Ok(out);
    }
    let Some(image) = &ex.image else {
        return Err(Error::contract(
            "distillation requires a (source, target, image) triplet; inference does not"
                .to_string(),
        ));
    };
    let f = feature.as_ref().expect("multimodal path produced a feature");
    let ttrace = model.teacher.forward(image)?;
    let (inverse, strace) = model.student.forward(&f.chw)?;
    if dcfg.image_space_only {
        out.representation = Some(distill::irm_kd_loss(dcfg, &[], image, &inverse)?);
        return Ok(out);
    }
    if dcfg.enable_irm {
        let pairs = pair_representations(&ttrace, &f.chw, &strace, dcfg.granularity)?;
        out.representation = Some(distill::irm_kd_loss(dcfg, &pairs, image, &inverse)?);
    }
    if dcfg.enable_iam {
        out.feature = Some(distill::iam_kd_loss(dcfg, &model.teacher, image, &inverse)?);
    }
    Ok(out)
}

/// Weighted batch objective: per-token translation loss plus per-example
/// means of each enabled distillation term.
pub fn batch_loss(model: &Model, batch: &Batch, tcfg: &TrainConfig) -> Result<(Tensor, StepMetrics)> {
    let n = batch.size();
    let mut trans_sum: Option<Tensor> = None;
    let mut rep_sum: Option<Tensor> = None;
    let mut feat_sum: Option<Tensor> = None;
    let mut tokens = 0usize;
    for i in 0..n {
        let src: Vec<usize> = batch.src[i]
            .iter()
            .zip(&batch.src_pad[i])
            .filter(|(_, p)| !**p)
            .map(|(t, _)| *t)
            .collect();
        let tgt: Vec<usize> = batch.tgt[i]
            .iter()
            .zip(&batch.tgt_pad[i])
            .filter(|(_, p)| !**p)
            .map(|(t, _)| *t)
            .collect();
        let image = batch.images.as_ref().map(|imgs| imgs[i].clone());
        let ex = TripletExample {
            source: src,
            target: tgt,
            image,
        };
        let l = example_losses(model, &ex)?;
        tokens += l.tokens;
        trans_sum = Some(acc(trans_sum, l.translation)?);
        if let Some(r) = l.representation {
            rep_sum = Some(acc(rep_sum, r)?);
        }
        if let Some(f) = l.feature {
            feat_sum = Some(acc(feat_sum, f)?);
        }
    }
    let trans = trans_sum.expect("non-empty batch");
    let trans_term = trans.scale(tcfg.weight_translation / tokens as f64);
    let rep_val = rep_sum.as_ref().map_or(0.0, Tensor::item) / n as f64;
    let feat_val = feat_sum.as_ref().map_or(0.0, Tensor::item) / n as f64;
    let mut total = trans_term;
    if let Some(r) = rep_sum {
        total = total.add(&r.scale(tcfg.weight_representation / n as f64))?;
    }
    if let Some(f) = feat_sum {
        total = total.add(&f.scale(tcfg.weight_feature / n as f64))?;
    }
    let metrics = StepMetrics {
        step: 0,
        epoch: 0,
        total: total.item(),
        translation: trans.item(),
        per_token: trans.item() / tokens as f64,
        representation: rep_val,
        feature: feat_val,
        tokens,
    };
    Ok((total, metrics))
}

fn acc(slot: Option<Tensor>, x: Tensor) -> Result<Tensor> {
    match slot {
        Some(s) => s.add(&x),
        None => Ok(x),
    }
}

pub struct TrainReport {
    pub steps: u64,
    pub final_metrics: Option<StepMetrics>,
    pub history: Vec<StepMetrics>,
}

/// Deterministic training loop. Metrics stream to `log` as JSON lines;
/// non-finite losses abort with an error naming the step.
pub fn train(
    model: &Model,
    examples: &[TripletExample],
    tcfg: &TrainConfig,
    log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::contract("no training examples".to_string()));
    }
    let params = model.trainable_parameters();
    let mut opt = Adam::new(tcfg, &params);
    let report = run_epochs(
        model,
        &mut opt,
        examples,
        tcfg,
        0..tcfg.epochs,
        0,
        log,
        checkpoint_dir,
    )?;
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(dir, model, &opt, tcfg, report.steps)?;
    }
    Ok(report)
}

/// Shared epoch loop: batch order for epoch `e` depends only on
/// `tcfg.seed + e`, so a resumed run replays the same schedule.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &Model,
    opt: &mut Adam,
    examples: &[TripletExample],
    tcfg: &TrainConfig,
    epochs: std::ops::Range<usize>,
    steps_done: u64,
    mut log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    let params = model.trainable_parameters();
    let mut report = TrainReport {
        steps: steps_done,
        final_metrics: None,
        history: Vec::new(),
    };
    'epochs: for epoch in epochs {
        let batches = crate::data::batchify(
            examples,
            tcfg.batch_size,
            tcfg.seed.wrapping_add(epoch as u64),
        )?;
        for batch in &batches {
            for (_, p) in &params {
                p.zero_grad();
            }
            let (loss, mut metrics) = batch_loss(model, batch, tcfg)?;
            if !loss.item().is_finite() {
                return Err(Error::contract(format!(
                    "training diverged: non-finite loss at step {}",
                    report.steps + 1
                )));
            }
            loss.backward()?;
            opt.step(&params)?;
            report.steps += 1;
            metrics.step = report.steps;
            metrics.epoch = epoch;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&metrics)?)?;
            }
            if let (Some(dir), Some(every)) = (checkpoint_dir, tcfg.checkpoint_interval) {
                if every > 0 && report.steps % every as u64 == 0 {
                    save_checkpoint(dir, model, opt, tcfg, report.steps)?;
                }
            }
            report.history.push(metrics.clone());
            report.final_metrics = Some(metrics);
            if tcfg.max_steps.is_some_and(|m| report.steps >= m as u64) {
                break 'epochs;
            }
        }
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab_size: usize,
    step: u64,
    adam_t: u64,
    /// Parameter name -> tensor file stem; `<stem>.tnsr` holds the
    /// values and, for trainable entries, `<stem>.m.tnsr` /
    /// `<stem>.v.tnsr` hold the optimizer moments.
    params: HashMap<String, String>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Model,
    opt: &Adam,
    tcfg: &TrainConfig,
    step: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut params = HashMap::new();
    let trainable: HashMap<&str, usize> = opt
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    for (i, (name, t)) in model.named_tensors().iter().enumerate() {
        let stem = format!("p{i:04}");
        tio::write_tensor(dir.join(format!("{stem}.tnsr")), t)?;
        if let Some(&slot) = trainable.get(name.as_str()) {
            let shape = t.shape();
            tio::write_tensor(
                dir.join(format!("{stem}.m.tnsr")),
                &Tensor::from_vec(shape, opt.m[slot].clone())?,
            )?;
            tio::write_tensor(
                dir.join(format!("{stem}.v.tnsr")),
                &Tensor::from_vec(shape, opt.v[slot].clone())?,
            )?;
        }
        params.insert(name.clone(), stem);
    }
    let manifest = CheckpointManifest {
        model_config: model.cfg.clone(),
        train_config: tcfg.clone(),
        vocab_size: model.vocab_size,
        step,
        adam_t: opt.t,
        params,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub opt: Adam,
    pub train_config: TrainConfig,
    pub step: u64,
}

/// Rebuild a model and optimizer from a checkpoint directory. The
/// stored config is authoritative; when `expect` is given it must match
/// exactly, otherwise nothing is loaded.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
    expect: Option<&ModelConfig>,
) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::format(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest.json: {e}")))?;
    if let Some(want) = expect {
        let a = serde_json::to_string(want)?;
        let b = serde_json::to_string(&manifest.model_config)?;
        if a != b {
            return Err(Error::config(
                "checkpoint model configuration does not match the requested one".to_string(),
            ));
        }
    }
    let model = Model::new(manifest.model_config.clone(), manifest.vocab_size)?;
    let mut opt = Adam::new(&manifest.train_config, &model.trainable_parameters());
    opt.t = manifest.adam_t;
    let trainable: HashMap<String, usize> = opt
        .names
        .iter()
        .enumerate()
        .map(|(n_i, n)| (n.clone(), n_i))
        .collect();
    for (name, t) in model.named_tensors() {
        let stem = manifest.params.get(&name).ok_or_else(|| {
            Error::format(format!("checkpoint is missing parameter {name:?}"))
        })?;
        let loaded = tio::read_tensor(dir.join(format!("{stem}.tnsr")))?;
        if loaded.shape() != t.shape() {
            return Err(Error::format(format!(
                "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        t.set_data(&loaded.data())?;
        if let Some(&slot) = trainable.get(&name) {
            opt.m[slot] = tio::read_tensor(dir.join(format!("{stem}.m.tnsr")))?.to_vec();
            opt.v[slot] = tio::read_tensor(dir.join(format!("{stem}.v.tnsr")))?.to_vec();
        }
    }
    Ok(LoadedCheckpoint {
        model,
        opt,
        train_config: manifest.train_config,
        step: manifest.step,
    })
}

/// Continue training from a loaded checkpoint over epochs
/// `start_epoch..end_epoch` of the original schedule, with optimizer
/// state carried over.
pub fn train_resumed(
    loaded: &mut LoadedCheckpoint,
    examples: &[TripletExample],
    start_epoch: usize,
    end_epoch: usize,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let tcfg = loaded.train_config.clone();
    run_epochs(
        &loaded.model,
        &mut loaded.opt,
        examples,
        &tcfg,
        start_epoch..end_epoch,
        loaded.step,
        log,
        None,
    )
}

//! Knowledge distillation between the image-reading teacher stack and
//! the feature-inverting student stack.
//!
//! Two losses: a representation-matching term summing similarity over
//! paired intermediate activations (plus an image-space term on the
//! student output), and a feature-space term comparing the teacher's
//! final activation on the real image against the generated multimodal
//! feature. Pairs are found by shape: the student mirrors the teacher,
//! so walking the teacher fine-to-coarse against the reversed
//! student-side path gives a bijection at every granularity.

pub mod cnn;

use crate::error::{Error, Result};
use crate::model::config::{DistillConfig, Granularity, Similarity};
use crate::tensor::Tensor;

pub use cnn::{
    export_weights, import_weights, param_checksum, ActivationTrace, StudentNet, TeacherNet,
    TraceEntry,
};

/// One (teacher activation, student-side activation) pair entering the
/// representation loss.
#[derive(Debug, Clone)]
pub struct RepPair {
    pub teacher_name: String,
    pub student_name: String,
    pub teacher: Tensor,
    pub student: Tensor,
}

/// Score one representation pair with the configured measure. All
/// measures flatten their inputs; shapes must agree element-for-element.
pub fn similarity(a: &Tensor, b: &Tensor, kind: Similarity) -> Result<Tensor> {
    match kind {
        Similarity::L2 => Tensor::l2_distance(a, b),
        Similarity::L1 => Tensor::l1_distance(a, b),
        Similarity::Linf => Tensor::linf_distance(a, b),
        Similarity::Cosine => Tensor::cosine_distance(a, b),
        Similarity::Kl => Tensor::kl_divergence(a, b),
    }
}

/// Match teacher activations to student-side activations by shape.
///
/// The student side is `{m} ∪ student trace`: the generated feature
/// stands in for the teacher's final activation. `Model` granularity
/// returns exactly that single pair; `Block` pairs stage outputs;
/// `Layer` pairs every recorded activation. A teacher activation with
/// no shape-identical partner is a configuration error naming the
/// offending entry.
pub fn pair_representations(
    teacher: &ActivationTrace,
    m_chw: &Tensor,
    student: &ActivationTrace,
    granularity: Granularity,
) -> Result<Vec<RepPair>> {
    if teacher.is_empty() {
        return Err(Error::contract("empty teacher trace"));
    }
    if granularity == Granularity::Model {
        let last = teacher.last();
        if last.value.shape() != m_chw.shape() {
            return Err(Error::config(format!(
                "{}: teacher shape {:?} != generated feature shape {:?}",
                last.name,
                last.value.shape(),
                m_chw.shape()
            )));
        }
        return Ok(vec![RepPair {
            teacher_name: last.name.clone(),
            student_name: "generator.m".into(),
            teacher: last.value.clone(),
            student: m_chw.clone(),
        }]);
    }

    let keep = |e: &&TraceEntry| granularity == Granularity::Layer || e.stage_end;
    let teacher_side: Vec<&TraceEntry> = teacher.entries.iter().filter(keep).collect();
    // Student path runs coarse-to-fine with m in front; reverse it so
    // both lists run fine-to-coarse, keeping duplicate shapes aligned.
    let mut student_side: Vec<(String, Tensor)> = vec![("generator.m".into(), m_chw.clone())];
    student_side.extend(
        student
            .entries
            .iter()
            .filter(keep)
            .map(|e| (e.name.clone(), e.value.clone())),
    );
    student_side.reverse();

    let mut used = vec![false; student_side.len()];
    let mut pairs = Vec::with_capacity(teacher_side.len());
    for entry in teacher_side {
        let want = entry.value.shape();
        let found = student_side
            .iter()
            .enumerate()
            .find(|(i, (_, t))| !used[*i] && t.shape() == want);
        let Some((i, (name, tensor))) = found else {
            return Err(Error::config(format!(
                "{}: no student-side activation of shape {:?} to pair with",
                entry.name, want
            )));
        };
        used[i] = true;
        pairs.push(RepPair {
            teacher_name: entry.name.clone(),
            student_name: name.clone(),
            teacher: entry.value.clone(),
            student: tensor.clone(),
        });
    }
    Ok(pairs)
}

/// Representation-matching loss: similarity summed over all pairs at
/// the configured granularity, plus the same measure between the real
/// image and the student's inverse image. With `image_space_only` the
/// pair sum is dropped and only the image term remains.
pub fn irm_kd_loss(
    cfg: &DistillConfig,
    pairs: &[RepPair],
    image: &Tensor,
    inverse_image: &Tensor,
) -> Result<Tensor> {
    let image = normalize_image_batch(image)?;
    let mut loss = similarity(&image, inverse_image, cfg.similarity)?;
    if !cfg.image_space_only {
        for p in pairs {
            loss = loss.add(&similarity(&p.teacher, &p.student, cfg.similarity)?)?;
        }
    }
    Ok(loss)
}

/// Feature-space loss: teacher's final activation on the student's
/// inverse image against the teacher's final activation on the real
/// image. Gradients flow through the (frozen) teacher into the
/// inverse image and onward into the student and generator.
pub fn iam_kd_loss(
    cfg: &DistillConfig,
    teacher: &TeacherNet,
    image: &Tensor,
    inverse_image: &Tensor,
) -> Result<Tensor> {
    let real = teacher.forward(image)?.last().value.clone();
    let inv = teacher.forward(inverse_image)?.last().value.clone();
    similarity(&real, &inv, cfg.similarity)
}

fn normalize_image_batch(image: &Tensor) -> Result<Tensor> {
    if image.rank() == 3 {
        let s = image.shape().to_vec();
        image.reshape(&[1, s[0], s[1], s[2]])
    } else {
        Ok(image.clone())
    }
}

//! Python bindings for the image-free multimodal translation library.
//!
//! Exposes the tensor engine, the synthetic corpus generator, BLEU, and
//! a `Translator` wrapper around model construction / training /
//! decoding. Everything is deterministic given the seeds.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmt_core::data::{synth_examples, synth_generate, synth_vocabulary, SynthConfig, Vocabulary};
use mmt_core::eval;
use mmt_core::model::{Model, ModelConfig};
use mmt_core::tensor::io;
use mmt_core::train::{self, TrainConfig};
use mmt_core::Tensor as CoreTensor;

fn err(e: mmt_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense f64 tensor with reverse-mode autodiff.
#[pyclass(name = "Tensor", unsendable)]
#[derive(Clone)]
struct PyTensor {
    inner: CoreTensor,
}

#[pymethods]
impl PyTensor {
    /// Build a tensor from a shape and a flat row-major data list.
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let inner = if requires_grad {
            CoreTensor::param(&shape, data).map_err(err)?
        } else {
            CoreTensor::from_vec(&shape, data).map_err(err)?
        };
        Ok(PyTensor { inner })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: CoreTensor::zeros(&shape),
        }
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f64) -> Self {
        PyTensor {
            inner: CoreTensor::full(&shape, value),
        }
    }

    /// Read a tensor from the binary tensor file format.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTensor {
            inner: io::read_tensor(path).map_err(err)?,
        })
    }

    /// Write this tensor in the binary tensor file format (f32 payload).
    fn save(&self, path: &str) -> PyResult<()> {
        io::write_tensor(path, &self.inner).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    /// Flat row-major copy of the values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    /// Accumulated gradient (flat), or None before any backward pass.
    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn zero_grad(&self) {
        self.inner.zero_grad()
    }

    /// Scalar value of a one-element tensor.
    fn item(&self) -> PyResult<f64> {
        if self.inner.len() != 1 {
            return Err(PyValueError::new_err(format!(
                "item() on tensor of {} elements",
                self.inner.len()
            )));
        }
        Ok(self.inner.item())
    }

    /// Reverse-mode sweep from this scalar.
    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }

    fn add(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.add(&other.inner).map_err(err)?,
        })
    }

    fn sub(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.sub(&other.inner).map_err(err)?,
        })
    }

    fn mul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.mul(&other.inner).map_err(err)?,
        })
    }

    fn scale(&self, c: f64) -> PyTensor {
        PyTensor {
            inner: self.inner.scale(c),
        }
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.matmul(&other.inner).map_err(err)?,
        })
    }

    fn transpose(&self) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.transpose2().map_err(err)?,
        })
    }

    fn relu(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.relu(),
        }
    }

    fn sigmoid(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.sigmoid(),
        }
    }

    fn softmax(&self, axis: usize) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.softmax(axis).map_err(err)?,
        })
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.reshape(&shape).map_err(err)?,
        })
    }

    fn sum(&self) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.sum().map_err(err)?,
        })
    }

    fn mean(&self) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.mean_all().map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape(),
            self.inner.requires_grad()
        )
    }
}

/// Corpus-level BLEU-4 (lowercased, unsmoothed). Returns a dict with
/// `bleu`, `precisions`, `brevity_penalty`, `hyp_len`, `ref_len`.
#[pyfunction]
fn bleu4<'py>(
    py: Python<'py>,
    hypotheses: Vec<String>,
    references: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::bleu4(&hypotheses, &references).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("bleu", r.bleu)?;
    d.set_item("precisions", r.precisions.to_vec())?;
    d.set_item("brevity_penalty", r.brevity_penalty)?;
    d.set_item("hyp_len", r.hyp_len)?;
    d.set_item("ref_len", r.ref_len)?;
    Ok(d)
}

/// Generate the synthetic disambiguation corpus and return
/// `(src_lines, tgt_lines)`. The full triplets (including images) back
/// the `Translator.train_synthetic` path.
#[pyfunction]
#[pyo3(signature = (n, seed = 1))]
fn synth_corpus(n: usize, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
    let corpus = synth_generate(&SynthConfig {
        n,
        seed,
        ..Default::default()
    })
    .map_err(err)?;
    Ok((corpus.src_lines, corpus.tgt_lines))
}

/// Generate a synthetic corpus and write it as a data directory
/// (`src.txt`, `tgt.txt`, `vocab.txt`, `meta.json`, `images/`).
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed = 1))]
fn write_synth_corpus(out_dir: &str, n: usize, seed: u64) -> PyResult<()> {
    let corpus = synth_generate(&SynthConfig {
        n,
        seed,
        ..Default::default()
    })
    .map_err(err)?;
    let vocab = synth_vocabulary(&corpus);
    mmt_core::data::write_corpus(Path::new(out_dir), &corpus, &vocab).map_err(err)
}

/// A trained translation model plus its vocabulary.
#[pyclass(unsendable)]
struct Translator {
    model: Model,
    vocab: Vocabulary,
}

#[pymethods]
impl Translator {
    /// Train on a freshly generated synthetic corpus. `config_json`
    /// overrides model hyperparameters (same schema as the CLI config).
    #[staticmethod]
    #[pyo3(signature = (n, epochs, seed = 1, config_json = None))]
    fn train_synthetic(
        n: usize,
        epochs: usize,
        seed: u64,
        config_json: Option<&str>,
    ) -> PyResult<Translator> {
        let mcfg: ModelConfig = match config_json {
            Some(s) => serde_json::from_str(s)
                .map_err(|e| PyValueError::new_err(format!("bad config JSON: {e}")))?,
            None => ModelConfig::default(),
        };
        let default_synth = SynthConfig::default();
        let corpus = synth_generate(&SynthConfig {
            n,
            seed,
            image_size: mcfg.image_size,
            patch_size: default_synth.patch_size.min(mcfg.image_size),
            ..default_synth
        })
        .map_err(err)?;
        let vocab = synth_vocabulary(&corpus);
        let examples = synth_examples(&corpus, &vocab).map_err(err)?;
        let model = Model::new(mcfg, vocab.len()).map_err(err)?;
        let tcfg = TrainConfig {
            epochs,
            seed,
            ..Default::default()
        };
        train::train(&model, &examples, &tcfg, None, None).map_err(err)?;
        Ok(Translator { model, vocab })
    }

    /// Load a model from a CLI-produced checkpoint directory and its
    /// vocabulary file.
    #[staticmethod]
    fn load(checkpoint_dir: &str, vocab_path: &str) -> PyResult<Translator> {
        let vocab = Vocabulary::load(vocab_path).map_err(err)?;
        let loaded = train::load_checkpoint(Path::new(checkpoint_dir), None).map_err(err)?;
        Ok(Translator {
            model: loaded.model,
            vocab,
        })
    }

    /// Greedy-decode one source sentence. No image is involved.
    fn translate(&self, line: &str) -> PyResult<String> {
        let ids = self.vocab.encode_line(line);
        let out = self.model.greedy_decode(&ids).map_err(err)?;
        Ok(self.vocab.decode_ids(&out))
    }

    /// Beam-search decode one source sentence.
    fn translate_beam(&self, line: &str, beam: usize) -> PyResult<String> {
        let ids = self.vocab.encode_line(line);
        let out = self.model.beam_decode(&ids, beam).map_err(err)?;
        Ok(self.vocab.decode_ids(&out))
    }

    /// Corpus BLEU of greedy translations against references.
    fn bleu(&self, src_lines: Vec<String>, ref_lines: Vec<String>) -> PyResult<f64> {
        if src_lines.len() != ref_lines.len() {
            return Err(PyValueError::new_err("source/reference length mismatch"));
        }
        let hyps: Vec<String> = src_lines
            .iter()
            .map(|s| self.translate(s))
            .collect::<PyResult<_>>()?;
        Ok(eval::bleu4(&hyps, &ref_lines).map_err(err)?.bleu)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

#[pymodule]
fn mmt_py(m: &Bound<PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<Translator>()?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(write_synth_corpus, m)?)?;
    Ok(())
}

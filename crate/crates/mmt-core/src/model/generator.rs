//! Text-to-multimodal feature generation.
//!
//! Pools the position-encoded source embeddings into one global text
//! vector, projects it into the visual channel space, and replicates it
//! over every spatial region. The result is served in two layouts: as
//! pseudo-token rows for the encoder and as a channel-major map for the
//! student stack and feature-space loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

/// Generated feature in both layouts. `rows` is `[P, C_m]` (one row per
/// region, all identical); `chw` is the same values as `[1, C_m, p, p]`.
pub struct MultimodalFeature {
    pub rows: Tensor,
    pub chw: Tensor,
}

pub struct Generator {
    /// Projection from model width to visual channels, `[d, C_m]`.
    pub wt: Tensor,
    pub bias: Option<Tensor>,
    pub use_relu: bool,
    spatial: usize,
    channels: usize,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Generator {
        let d = cfg.d_model;
        let c = cfg.feature_channels();
        Generator {
            wt: Tensor::param_randn(&[d, c], (1.0 / d as f64).sqrt(), rng),
            bias: cfg
                .generator_bias
                .then(|| Tensor::param(&[c], vec![0.0; c]).expect("bias shape")),
            use_relu: cfg.generator_relu,
            spatial: cfg.feature_spatial(),
            channels: c,
        }
    }

    /// Masked mean over real (kept) rows of the position-encoded source
    /// embeddings; `[I, d]` in, `[1, d]` out. All-padding input is a
    /// contract error.
    pub fn global_text_feature(x: &Tensor, keep: &[bool]) -> Result<Tensor> {
        if keep.iter().all(|k| !k) {
            return Err(Error::contract(
                "global text feature needs at least one real token".to_string(),
            ));
        }
        let d = x.shape()[1];
        x.mean_rows_masked(keep)?.reshape(&[1, d])
    }

    /// Full generation pass from position-encoded embeddings.
    pub fn generate(&self, x: &Tensor, keep: &[bool]) -> Result<MultimodalFeature> {
        let tbar = Self::global_text_feature(x, keep)?;
        self.project(&tbar)
    }

    /// Project a `[1, d]` global text vector and replicate it spatially.
    pub fn project(&self, tbar: &Tensor) -> Result<MultimodalFeature> {
        let mut v = tbar.matmul(&self.wt)?;
        if let Some(b) = &self.bias {
            v = v.add_bias(b)?;
        }
        if self.use_relu {
            v = v.relu();
        }
        let p = self.spatial;
        let chw = v
            .reshape(&[1, self.channels, 1, 1])?
            .avg_unpool2d(p)?;
        let ones = Tensor::full(&[p * p, 1], 1.0);
        let rows = ones.matmul(&v)?;
        Ok(MultimodalFeature { rows, chw })
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("generator.wt".to_string(), &self.wt)];
        if let Some(b) = &self.bias {
            out.push(("generator.bias".to_string(), b));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen(cfg: &ModelConfig) -> Generator {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Generator::new(cfg, &mut rng)
    }

    #[test]
    fn shapes_and_replication() {
        let cfg = ModelConfig::default();
        let g = gen(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[5, cfg.d_model], 1.0, &mut rng);
        let keep = [true, true, true, false, false];
        let f = g.generate(&x, &keep).unwrap();
        assert_eq!(f.rows.shape(), &[16, 128]);
        assert_eq!(f.chw.shape(), &[1, 128, 4, 4]);
        // Every row must be the same projected vector.
        let rows = f.rows.to_vec();
        for r in 1..16 {
            assert_eq!(&rows[r * 128..(r + 1) * 128], &rows[..128]);
        }
        // chw is the channel-major transpose of rows.
        let chw = f.chw.to_vec();
        for c in 0..128 {
            for s in 0..16 {
                assert_eq!(chw[c * 16 + s], rows[s * 128 + c]);
            }
        }
    }

    #[test]
    fn masked_mean_ignores_padding() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap();
        let t = Generator::global_text_feature(&x, &[true, true, false]).unwrap();
        assert_eq!(t.to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn all_padding_is_contract_error() {
        let x = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            Generator::global_text_feature(&x, &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradients_flow_to_projection_and_input() {
        let cfg = ModelConfig::default();
        let g = gen(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::param_randn(&[4, cfg.d_model], 1.0, &mut rng);
        let keep = [true, true, false, true];
        let f = g.generate(&x, &keep).unwrap();
        // Use both layouts so both branches carry gradient.
        let loss = f.rows.sum().unwrap().add(&f.chw.sum().unwrap()).unwrap();
        loss.backward().unwrap();
        assert!(g.wt.grad().unwrap().iter().any(|v| *v != 0.0));
        let gx = x.grad().unwrap();
        let d = cfg.d_model;
        // Padded row 2 receives no gradient; kept rows share it equally.
        assert!(gx[2 * d..3 * d].iter().all(|v| *v == 0.0));
        assert!(gx[..d].iter().any(|v| *v != 0.0));
        assert_eq!(&gx[..d], &gx[3 * d..4 * d]);
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            d_model: 4,
            heads: 2,
            stage_channels: vec![2, 3],
            image_size: 8,
            ..Default::default()
        };
        let g = gen(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let keep = [true, false, true];
        let r = crate::tensor::grad_check(
            |x| {
                let f = g.generate(x, &keep)?;
                let a = f.rows.mul(&f.rows)?.sum()?;
                let b = f.chw.sum()?;
                a.add(&b)
            },
            &x0,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn bias_and_relu_apply_when_enabled() {
        let cfg = ModelConfig {
            generator_bias: true,
            generator_relu: true,
            ..Default::default()
        };
        let g = gen(&cfg);
        assert_eq!(g.parameters().len(), 2);
        let x = Tensor::full(&[2, cfg.d_model], 0.5);
        let f = g.generate(&x, &[true, true]).unwrap();
        assert!(f.rows.data().iter().all(|v| *v >= 0.0));
    }
}
